//! Finite-difference suite over every primitive, the style operations, the
//! loss terms and the style-leaf extraction path.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{Architecture, ModelParams};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::objectives::{cross_entropy, loss_adv, loss_cdto, loss_cls, loss_con, loss_fsl};
use crate::rng::{self, Rng};
use crate::style::{adain_transfer, compute_style, restyle, Style, STYLE_EPS};
use crate::tensor::{forward_primitive, Primitive, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

fn normal(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

/// Values in `[lo, hi]` with a random sign when `signed`.
fn away_from_zero(r: &mut Rng, shape: &[usize], lo: f64, hi: f64, signed: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = r.gen_range(lo..hi);
            if signed && r.gen_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * w)` for a fixed pseudo-random `w`, making every output
/// coordinate matter.
fn readout(out: &Tensor, seed: u64) -> Result<Tensor> {
    let w = normal(&mut rng::stream(seed, &[rng::tag("readout")]), out.shape());
    out.mul(&w)?.sum()
}

fn primitive_cases() -> Vec<(&'static str, Primitive, Vec<Vec<usize>>)> {
    use Primitive::*;
    vec![
        ("add", Add, vec![vec![3, 4], vec![3, 4]]),
        ("sub", Sub, vec![vec![3, 4], vec![3, 4]]),
        ("mul", Mul, vec![vec![3, 4], vec![3, 4]]),
        ("div", Div, vec![vec![3, 4], vec![3, 4]]),
        ("affine", Affine { scale: 2.5, shift: -0.3 }, vec![vec![3, 4]]),
        ("matmul", MatMul, vec![vec![3, 4], vec![4, 2]]),
        ("conv3x3", Conv3x3, vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]]),
        ("relu", Relu, vec![vec![3, 4]]),
        ("avg_pool2", AvgPool2, vec![vec![1, 2, 4, 4]]),
        ("relu_avg_pool2", ReluAvgPool2, vec![vec![1, 2, 4, 4]]),
        ("spatial_mean", SpatialMean, vec![vec![2, 3, 3, 3]]),
        ("spatial_var", SpatialVar, vec![vec![2, 3, 3, 3]]),
        ("sqrt", Sqrt, vec![vec![3, 4]]),
        ("sum", Sum, vec![vec![3, 4]]),
        ("mean", Mean, vec![vec![3, 4]]),
        ("sum_axis", SumAxis(1), vec![vec![2, 3, 4]]),
        ("broadcast_hw", BroadcastHw { h: 3, w: 2 }, vec![vec![2, 3]]),
        ("repeat_rows", RepeatRows(3), vec![vec![4]]),
        ("log_softmax", LogSoftmax, vec![vec![3, 5]]),
        ("exp", Exp, vec![vec![3, 4]]),
        ("neg", Neg, vec![vec![3, 4]]),
        ("l2_norm_axis", L2NormAxis(1), vec![vec![3, 4]]),
        ("concat_batch", ConcatBatch, vec![vec![2, 3], vec![1, 3]]),
        ("slice_batch", SliceBatch { start: 1, len: 2 }, vec![vec![4, 3]]),
        ("reshape", Reshape(vec![4, 3]), vec![vec![3, 4]]),
        ("transpose", Transpose, vec![vec![3, 4]]),
    ]
}

fn run<F>(name: &str, trials: usize, mut one: F) -> Result<CheckResult>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut max_error = 0.0f64;
    for t in 0..trials {
        max_error = max_error.max(one(t)?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        trials,
        max_error,
    })
}

/// Every tape primitive at `trials` random smooth points.
pub fn primitive_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    primitive_cases()
        .into_iter()
        .map(|(name, op, shapes)| {
            run(name, trials, |t| {
                let mut r = rng::stream(seed, &[rng::tag(name), t as u64]);
                let point: Vec<Tensor> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| match (name, i) {
                        ("div", 1) => away_from_zero(&mut r, s, 0.5, 2.0, true),
                        ("sqrt", _) => away_from_zero(&mut r, s, 0.5, 2.0, false),
                        ("relu" | "relu_avg_pool2", _) => away_from_zero(&mut r, s, 0.1, 2.0, true),
                        _ => normal(&mut r, s),
                    })
                    .collect();
                let out_seed = rng::derive(seed, &[rng::tag(name), t as u64, 1]);
                grad_check(
                    |x| {
                        let refs: Vec<&Tensor> = x.iter().collect();
                        readout(&forward_primitive(&op, &refs)?, out_seed)
                    },
                    &point,
                    STEP,
                )
            })
        })
        .collect()
}

/// `compute_style`, `adain_transfer` and the five loss terms.
pub fn style_and_loss_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let s = |name: &str, t: usize| rng::stream(seed, &[rng::tag(name), t as u64]);
    let labels = [0usize, 2, 1, 3];
    let mut out = vec![
        run("compute_style", trials, |t| {
            let mut r = s("compute_style", t);
            let f = normal(&mut r, &[2, 3, 3, 3]);
            grad_check(
                |x| {
                    let st = compute_style(&x[0], STYLE_EPS)?;
                    readout(&st.mu, 1)?.add(&readout(&st.sigma, 2)?)
                },
                &[f],
                STEP,
            )
        })?,
        run("adain_transfer", trials, |t| {
            let mut r = s("adain_transfer", t);
            let f = normal(&mut r, &[2, 3, 3, 3]);
            let mu = normal(&mut r, &[2, 3]);
            let sigma = away_from_zero(&mut r, &[2, 3], 0.5, 2.0, false);
            grad_check(
                |x| {
                    let own = compute_style(&x[0], STYLE_EPS)?;
                    let target = Style { mu: x[1].clone(), sigma: x[2].clone(), eps: STYLE_EPS };
                    readout(&adain_transfer(&x[0], &own, &target)?, 3)
                },
                &[f, mu, sigma],
                STEP,
            )
        })?,
    ];
    out.push(run("loss_cls", trials, |t| {
        let mut r = s("loss_cls", t);
        let pts = vec![normal(&mut r, &[4, 5]), normal(&mut r, &[4, 5]), normal(&mut r, &[4, 5])];
        grad_check(|x| loss_cls(&x[0], &x[1..], &labels, 2), &pts, STEP)
    })?);
    out.push(run("loss_fsl", trials, |t| {
        let mut r = s("loss_fsl", t);
        let pts = vec![normal(&mut r, &[4, 5]), normal(&mut r, &[4, 5])];
        grad_check(|x| loss_fsl(&x[0], &x[1], &labels), &pts, STEP)
    })?);
    out.push(run("loss_cdto", trials, |t| {
        let mut r = s("loss_cdto", t);
        let pts = vec![normal(&mut r, &[4, 3]), normal(&mut r, &[4, 3]), normal(&mut r, &[4, 3])];
        // keep every row away from the hinge
        let margin = |x: &[Tensor]| -> Vec<f64> {
            let (a, p, n) = (x[0].data(), x[1].data(), x[2].data());
            (0..4)
                .map(|b| {
                    let d = |u: &[f64]| (0..3).map(|c| (a[b * 3 + c] - u[b * 3 + c]).powi(2)).sum::<f64>();
                    d(p) - d(n) + 1.0
                })
                .collect()
        };
        if margin(&pts).iter().any(|m| m.abs() < 1e-3) {
            return Ok(0.0);
        }
        grad_check(|x| loss_cdto(&x[0], &x[1], &x[2], 1.0), &pts, STEP)
    })?);
    out.push(run("loss_con", trials, |t| {
        let mut r = s("loss_con", t);
        // p_g is a detached target, so only p_i and p_i_fsl are leaves
        let p_g = normal(&mut r, &[4, 5]);
        let pts: Vec<Tensor> = (0..4).map(|_| normal(&mut r, &[4, 5])).collect();
        grad_check(|x| loss_con(&x[0..2], &p_g, &x[2..4], &labels, 0.2), &pts, STEP)
    })?);
    out.push(run("loss_adv", trials, |t| {
        let mut r = s("loss_adv", t);
        // the global prediction is a detached target
        let (p_adv, p_g) = (normal(&mut r, &[4, 5]), normal(&mut r, &[4, 5]));
        grad_check(|x| loss_adv(&x[0], &p_g), &[p_adv], STEP)
    })?);
    Ok(out)
}

/// Gradient of the classification loss with respect to the style leaves of
/// block `j` for a tiny backbone, one check per block.
pub fn extraction_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let arch = Architecture { base_width: 4, ..Architecture::default() };
    (1..=3)
        .map(|j| {
            run(&format!("style_leaves_block{j}"), trials, |t| {
                let mut r = rng::stream(seed, &[rng::tag("extract"), j as u64, t as u64]);
                let params = ModelParams::init(arch, 1.0, r.gen());
                let bb = params.bind(None);
                let images = Tensor::new(vec![2, 3, 32, 32], (0..6144).map(|_| r.gen_range(0.0..1.0)).collect())?;
                let feature = bb.forward_range(&images, 1, j)?.feature;
                let own = compute_style(&feature, STYLE_EPS)?;
                let labels = [r.gen_range(0..12), r.gen_range(0..12)];
                grad_check(
                    |x| {
                        let target = Style { mu: x[0].clone(), sigma: x[1].clone(), eps: STYLE_EPS };
                        let f = restyle(&feature, &target)?;
                        let logits = bb.global_classify(&bb.forward_range(&f, j + 1, 4)?)?;
                        cross_entropy(&logits, &labels)
                    },
                    &[own.mu.clone(), own.sigma.clone()],
                    STEP,
                )
            })
        })
        .collect()
}

/// The full suite with `trials` points per primitive and per loss term.
pub fn gradcheck_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = primitive_checks(trials, seed)?;
    all.extend(style_and_loss_checks(trials, seed)?);
    all.extend(extraction_checks(trials.clamp(1, 3), seed)?);
    Ok(all)
}
