use proptest::prelude::*;
use rand::SeedableRng;

use srasp_core::backbone::proto_classify;
use srasp_core::mining::{select_indices, Strategy as Mining};
use srasp_core::reorient::{normalize_rows, reorient, ReorientConfig, StyleGradientSet};
use srasp_core::rng::Rng;
use srasp_core::style::{adain_transfer, compute_style, Style, STYLE_EPS};
use srasp_core::tensor::Tensor;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

fn row_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const B: usize = 3;
const C: usize = 4;

fn grad_set() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..4).prop_flat_map(|k| {
        (
            values(B * C),
            values(B * C),
            prop::collection::vec(values(B * C), k),
            prop::collection::vec(values(B * C), k),
        )
    })
}

fn away_from_zero(v: Vec<f64>) -> Vec<f64> {
    // keep every global row clear of the degenerate-gradient threshold
    v.into_iter().map(|x| if x.abs() < 0.05 { 0.05 } else { x }).collect()
}

fn build(g_mu: Vec<f64>, g_sigma: Vec<f64>, crops_mu: Vec<Vec<f64>>, crops_sigma: Vec<Vec<f64>>) -> StyleGradientSet {
    let s = [B, C];
    StyleGradientSet::from_raw(
        tensor(&s, away_from_zero(g_mu)),
        tensor(&s, away_from_zero(g_sigma)),
        crops_mu.into_iter().map(|v| tensor(&s, v)).collect(),
        crops_sigma.into_iter().map(|v| tensor(&s, v)).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adain_round_trip(
        f in values(2 * 3 * 4 * 4),
        mu in values(6),
        sigma in prop::collection::vec(0.1f64..3.0, 6),
    ) {
        let feature = tensor(&[2, 3, 4, 4], f);
        let source = compute_style(&feature, STYLE_EPS).unwrap();
        let target = Style { mu: tensor(&[2, 3], mu.clone()), sigma: tensor(&[2, 3], sigma.clone()), eps: STYLE_EPS };
        let out = adain_transfer(&feature, &source, &target).unwrap();
        let mean = out.spatial_mean().unwrap();
        let var = out.spatial_var().unwrap();
        for i in 0..6 {
            let s2 = source.sigma.data()[i].powi(2);
            let expect = sigma[i] * sigma[i] * (s2 - STYLE_EPS) / s2;
            prop_assert!((mean.data()[i] - mu[i]).abs() < 1e-9);
            prop_assert!((var.data()[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_permutation_permutes_style(f in values(1 * 3 * 4 * 4), perm in Just([2usize, 0, 1]).prop_shuffle()) {
        let feature = tensor(&[1, 3, 4, 4], f.clone());
        let mut permuted = vec![0.0; f.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 16..(dst + 1) * 16].copy_from_slice(&f[src * 16..(src + 1) * 16]);
        }
        let a = compute_style(&feature, STYLE_EPS).unwrap();
        let b = compute_style(&tensor(&[1, 3, 4, 4], permuted), STYLE_EPS).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert_eq!(b.mu.data()[dst], a.mu.data()[src]);
            prop_assert_eq!(b.sigma.data()[dst], a.sigma.data()[src]);
        }
    }

    #[test]
    fn reorientation_invariants((gm, gs, cm, cs) in grad_set(), xi in 0.0f64..2.0) {
        let cfg = ReorientConfig { xi, ..ReorientConfig::default() };
        let set = reorient(build(gm, gs, cm, cs), &cfg).unwrap();
        let pairs = [
            (&set.g_mu_global, &set.g_mu_crops, &set.gamma_mu, &set.g_mu_ensemble),
            (&set.g_sigma_global, &set.g_sigma_crops, &set.gamma_sigma, &set.g_sigma_ensemble),
        ];
        for (global, crops, gammas, ens) in pairs {
            for (crop, gamma) in crops.iter().zip(gammas) {
                for b in 0..B {
                    prop_assert!((-1.0..=1.0).contains(&gamma[b]));
                    let g = &global.data()[b * C..(b + 1) * C];
                    let x = &crop.data()[b * C..(b + 1) * C];
                    let rectified: Vec<f64> = x.iter().map(|v| gamma[b] * v).collect();
                    prop_assert!(row_dot(&rectified, g) >= 0.0);
                }
            }
            for n in row_norms(ens.as_ref().unwrap()) {
                prop_assert!(n <= 1.0 + xi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_xi_is_normalized_global((gm, gs, cm, cs) in grad_set()) {
        let cfg = ReorientConfig { xi: 0.0, ..ReorientConfig::default() };
        let set = reorient(build(gm, gs, cm, cs), &cfg).unwrap();
        let expect = normalize_rows(&set.g_mu_global).unwrap();
        for (a, b) in set.g_mu_ensemble.unwrap().data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_crops_give_scaled_global(g in values(B * C), scales in prop::collection::vec(0.1f64..5.0, 1..4), xi in 0.0f64..2.0) {
        let g = away_from_zero(g);
        let crops: Vec<Vec<f64>> = scales.iter().map(|s| g.iter().map(|v| s * v).collect()).collect();
        let cfg = ReorientConfig { xi, ..ReorientConfig::default() };
        let set = reorient(build(g.clone(), g.clone(), crops.clone(), crops), &cfg).unwrap();
        let unit = normalize_rows(&tensor(&[B, C], g)).unwrap();
        for (a, b) in set.g_mu_ensemble.unwrap().data().iter().zip(unit.data()) {
            prop_assert!((a - (1.0 + xi) * b).abs() < 1e-10);
        }
    }

    #[test]
    fn crop_scale_leaves_gamma_unchanged((gm, gs, cm, cs) in grad_set(), s in 0.01f64..100.0) {
        let cfg = ReorientConfig::default();
        let scaled: Vec<Vec<f64>> = cm.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
        let a = reorient(build(gm.clone(), gs.clone(), cm, cs.clone()), &cfg).unwrap();
        let b = reorient(build(gm, gs, scaled, cs), &cfg).unwrap();
        for (x, y) in a.gamma_mu.iter().flatten().zip(b.gamma_mu.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn proto_argmax_invariant_to_temp(
        support in values(3 * 4),
        query in values(5 * 4),
        t1 in 0.01f64..10.0,
        t2 in 0.01f64..10.0,
    ) {
        let s = tensor(&[3, 4], support);
        let q = tensor(&[5, 4], query);
        let argmax = |t: &Tensor| -> Vec<usize> {
            t.data().chunks(3).map(|r| (0..3).fold(0, |b, i| if r[i] > r[b] { i } else { b })).collect()
        };
        let a = proto_classify(&s, &[0, 1, 2], &q, 3, t1).unwrap();
        let b = proto_classify(&s, &[0, 1, 2], &q, 3, t2).unwrap();
        prop_assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn proto_support_permutation(support in values(6 * 3), query in values(4 * 3)) {
        let labels = [0usize, 1, 0, 2, 1, 2];
        let order = [4usize, 2, 5, 0, 3, 1];
        let s = tensor(&[6, 3], support.clone());
        let permuted: Vec<f64> = order.iter().flat_map(|&i| support[i * 3..(i + 1) * 3].to_vec()).collect();
        let permuted_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let q = tensor(&[4, 3], query);
        let a = proto_classify(&s, &labels, &q, 3, 1.0).unwrap();
        let b = proto_classify(&tensor(&[6, 3], permuted), &permuted_labels, &q, 3, 1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

/// Best size-`k` subset by exhaustive enumeration; ties go to the subset whose
/// sorted index list is lexicographically smallest.
pub fn brute_force(scores: &[f64], k: usize, maximize: bool) -> Vec<usize> {
    let m = scores.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let total: f64 = idx.iter().map(|&i| scores[i]).sum();
        let total = if maximize { total } else { -total };
        let better = match &best {
            None => true,
            Some((t, b)) => total > *t || (total == *t && idx < *b),
        };
        if better {
            best = Some((total, idx));
        }
    }
    best.unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    // Dyadic scores keep every subset sum exact, so enumerated ties are real ties.
    #[test]
    fn selection_matches_brute_force(
        (raw, k) in (1usize..=12).prop_flat_map(|m| (prop::collection::vec(0u32..8192, m), 1..=m)),
        levels in prop_oneof![Just(4u32), Just(8192u32)],
    ) {
        let scores: Vec<f64> = raw.iter().map(|&r| (r % levels) as f64 / 1024.0).collect();
        let mut rng = Rng::seed_from_u64(0);
        prop_assert_eq!(select_indices(&scores, k, Mining::Incoherent, &mut rng).unwrap(), brute_force(&scores, k, true));
        prop_assert_eq!(select_indices(&scores, k, Mining::Concept, &mut rng).unwrap(), brute_force(&scores, k, false));
    }
}
