use rand::Rng as _;

use srasp_core::backbone::{Architecture, ModelParams};
use srasp_core::data::{render_image, sample_episode, source_classes, DomainSpec, CHANNELS, IMAGE_SIZE};
use srasp_core::harness::evaluate;
use srasp_core::objectives::cross_entropy;
use srasp_core::perturb::{apply_adversarial, sign_step};
use srasp_core::reorient::extract_style_gradients;
use srasp_core::rng;
use srasp_core::style::{compute_style, STYLE_EPS};
use srasp_core::tensor::{Tape, Tensor};

const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

fn random_images(r: &mut rng::Rng, n: usize) -> Tensor {
    Tensor::new(vec![n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], (0..n * PIXELS).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Central differences on `coords` sampled parameter coordinates against the
/// tape gradient of `loss`.
fn param_fd<F>(params: &ModelParams, loss: F, coords: usize, seed: u64) -> f64
where
    F: Fn(&srasp_core::backbone::Backbone) -> Tensor,
{
    let tape = Tape::new();
    let bb = params.bind(Some(&tape));
    let l = loss(&bb);
    let analytic = bb.flat_gradients(&tape.backward(&l).unwrap());
    let mut r = rng::stream(seed, &[rng::tag("coords")]);
    let n = params.num_params();
    let mut worst = 0.0f64;
    let h = 1e-5;
    for _ in 0..coords {
        let i = r.gen_range(0..n);
        let at = |delta: f64| {
            let mut p = params.clone();
            let mut off = i;
            for t in &mut p.tensors {
                if off < t.data.len() {
                    t.data[off] += delta;
                    break;
                }
                off -= t.data.len();
            }
            loss(&p.bind(None)).item()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    worst
}

#[test]
fn classification_loss_matches_finite_differences() {
    let params = ModelParams::init(Architecture::default(), 1.0, 11);
    let images = random_images(&mut rng::stream(1, &[]), 2);
    let err = param_fd(
        &params,
        |bb| cross_entropy(&bb.global_classify(&bb.forward(&images).unwrap()).unwrap(), &[3, 7]).unwrap(),
        300,
        2,
    );
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn adversarial_path_matches_finite_differences() {
    let params = ModelParams::init(Architecture { base_width: 4, ..Architecture::default() }, 1.0, 5);
    let mut r = rng::stream(3, &[]);
    let images = random_images(&mut r, 2);
    // fixed adversarial style taken from an unrelated batch
    let other = random_images(&mut r, 2);
    let adv = compute_style(&params.bind(None).forward_range(&other, 1, 2).unwrap().feature, STYLE_EPS).unwrap();
    let err = param_fd(
        &params,
        |bb| {
            let f = apply_adversarial(&bb.forward_range(&images, 1, 2).unwrap().feature, &adv).unwrap();
            cross_entropy(&bb.global_classify(&bb.forward_range(&f, 3, 4).unwrap()).unwrap(), &[0, 5]).unwrap()
        },
        200,
        4,
    );
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn small_step_along_style_gradient_raises_loss() {
    let params = ModelParams::init(Architecture::default(), 1.0, 21);
    let bb = params.bind(None);
    let mut ascents = 0;
    let trials = 20;
    for t in 0..trials {
        let mut r = rng::stream(7, &[t]);
        let ep = sample_episode(5, 1, 3, &DomainSpec::source(), &mut r).unwrap();
        let images = ep.images().unwrap();
        let labels = ep.image_classes();
        let j = 1 + (t as usize % 3);
        let feature = bb.forward_range(&images, 1, j).unwrap().feature;
        let g = extract_style_gradients(&bb, &feature, &[], &labels, j, 0).unwrap();
        let style = compute_style(&feature, STYLE_EPS).unwrap();
        let adv = sign_step(&style, &g.g_mu_global, &g.g_sigma_global, (1e-3, 1e-3)).unwrap();
        let ce = |f: &Tensor| cross_entropy(&bb.global_classify(&bb.forward_range(f, j + 1, 4).unwrap()).unwrap(), &labels).unwrap().item();
        if ce(&apply_adversarial(&feature, &adv).unwrap()) > ce(&feature) {
            ascents += 1;
        }
    }
    assert!(ascents >= 18, "{ascents}/{trials}");
}

#[test]
fn linear_probe_separates_source_classes() {
    let classes = source_classes().len();
    let per_class = 40;
    let render = |c: usize, i: usize| render_image(c, srasp_core::data::instance_seed(c, i), &DomainSpec::source()).unwrap();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in source_classes() {
        for i in 0..per_class {
            train.push((render(c, i).to_vec(), c));
        }
        for i in 500..510 {
            test.push((render(c, i).to_vec(), c));
        }
    }
    // softmax regression on standardised pixels, full-batch gradient descent
    let mean: Vec<f64> = (0..PIXELS).map(|p| train.iter().map(|(x, _)| x[p]).sum::<f64>() / train.len() as f64).collect();
    let std: Vec<f64> = (0..PIXELS)
        .map(|p| (train.iter().map(|(x, _)| (x[p] - mean[p]).powi(2)).sum::<f64>() / train.len() as f64).sqrt().max(1e-3))
        .collect();
    let norm = |x: &[f64]| -> Vec<f64> { (0..PIXELS).map(|p| (x[p] - mean[p]) / std[p]).collect() };
    let train: Vec<(Vec<f64>, usize)> = train.iter().map(|(x, c)| (norm(x), *c)).collect();
    let test: Vec<(Vec<f64>, usize)> = test.iter().map(|(x, c)| (norm(x), *c)).collect();
    let mut w = vec![0.0; classes * PIXELS];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes).map(|c| w[c * PIXELS..(c + 1) * PIXELS].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let lr = 0.01;
    for _ in 0..200 {
        let mut grad = vec![0.0; w.len()];
        for (x, y) in &train {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let d = e[c] / s - if c == *y { 1.0 } else { 0.0 };
                for (g, xp) in grad[c * PIXELS..(c + 1) * PIXELS].iter_mut().zip(x) {
                    *g += d * xp;
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= lr * g / train.len() as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z = logits(&w, x);
            (0..classes).fold(0, |b, c| if z[c] > z[b] { c } else { b }) == *y
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.4, "probe accuracy {acc}");
}

#[test]
fn uninformative_model_scores_exact_chance() {
    // all-zero parameters give identical embeddings, so every query ties
    let mut params = ModelParams::init(Architecture::default(), 1.0, 99);
    for t in &mut params.tensors {
        t.data.fill(0.0);
    }
    let res = evaluate(&params, &[DomainSpec::lookup("severe").unwrap()], 600, 5, 1, 15, 3).unwrap();
    assert!((res[0].acc_mean - 20.0).abs() < 1e-9, "{}", res[0].acc_mean);
}

#[test]
fn untrained_model_is_not_below_chance() {
    // random conv features already carry shape information, so an untrained
    // model lands above chance rather than at it
    let params = ModelParams::init(Architecture::default(), 1.0, 99);
    let before = params.checksum();
    let res = evaluate(&params, &[DomainSpec::lookup("severe").unwrap()], 600, 5, 1, 15, 3).unwrap();
    assert_eq!(params.checksum(), before);
    let r = &res[0];
    assert!(r.acc_mean >= 20.0 - 3.0 * r.acc_ci95, "{} +- {}", r.acc_mean, r.acc_ci95);
    assert!(r.acc_mean < 60.0, "{} +- {}", r.acc_mean, r.acc_ci95);
}
