//! Adversarial style synthesis: noisy init, sign step, AdaIN application and
//! the per-episode gate.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::reorient::StyleGradientSet;
use crate::rng::Rng;
use crate::style::{restyle, Style};
use crate::tensor::Tensor;

pub const EPSILON_NOISE: f64 = 16.0 / 255.0;
pub const KAPPA_SET: [f64; 3] = [0.008, 0.08, 0.8];
pub const P_STYLE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbConfig {
    pub epsilon_noise: f64,
    pub kappa_set: Vec<f64>,
    pub p_style: f64,
    pub rng_seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            epsilon_noise: EPSILON_NOISE,
            kappa_set: KAPPA_SET.to_vec(),
            p_style: P_STYLE,
            rng_seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_noise >= 0.0) {
            return Err(invalid("perturb: epsilon_noise must be >= 0"));
        }
        if self.kappa_set.is_empty() || self.kappa_set.iter().any(|&k| !(k > 0.0)) {
            return Err(invalid("perturb: kappa_set must be non-empty and positive"));
        }
        if !(0.0..=1.0).contains(&self.p_style) {
            return Err(invalid("perturb: p_style outside [0, 1]"));
        }
        Ok(())
    }
}

fn noisy(t: &Tensor, scale: f64, rng: &mut Rng) -> Result<Tensor> {
    let data = t
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + scale * z
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// `mu + eps * z1`, `sigma + eps * z2` with standard normal `z`.
pub fn init_adversarial_style(global: &Style, cfg: &PerturbConfig, rng: &mut Rng) -> Result<Style> {
    Ok(Style {
        mu: noisy(&global.mu.detach(), cfg.epsilon_noise, rng)?,
        sigma: noisy(&global.sigma.detach(), cfg.epsilon_noise, rng)?,
        eps: global.eps,
    })
}

/// One independent `(kappa_mu, kappa_sigma)` pair.
pub fn draw_kappa(cfg: &PerturbConfig, rng: &mut Rng) -> (f64, f64) {
    let k1 = *cfg.kappa_set.choose(rng).expect("validated non-empty");
    let k2 = *cfg.kappa_set.choose(rng).expect("validated non-empty");
    (k1, k2)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `init + kappa * sign(G_e)`, with sigma floored at `sqrt(eps)`.
pub fn sign_step(init: &Style, g_mu: &Tensor, g_sigma: &Tensor, (k1, k2): (f64, f64)) -> Result<Style> {
    if g_mu.shape() != init.mu.shape() || g_sigma.shape() != init.sigma.shape() {
        return Err(invalid("sign_step: gradient shape differs from style"));
    }
    let floor = init.eps.sqrt();
    let mu = init.mu.data().iter().zip(g_mu.data()).map(|(m, g)| m + k1 * sign(*g)).collect();
    let sigma = init
        .sigma
        .data()
        .iter()
        .zip(g_sigma.data())
        .map(|(s, g)| (s + k2 * sign(*g)).max(floor))
        .collect();
    Ok(Style {
        mu: Tensor::new(init.mu.shape().to_vec(), mu)?,
        sigma: Tensor::new(init.sigma.shape().to_vec(), sigma)?,
        eps: init.eps,
    })
}

/// Draws a kappa pair and takes the sign step along the ensemble gradient.
pub fn step_adversarial_style(
    init: &Style,
    ensemble: &StyleGradientSet,
    cfg: &PerturbConfig,
    rng: &mut Rng,
) -> Result<(Style, (f64, f64))> {
    let (Some(g_mu), Some(g_sigma)) = (&ensemble.g_mu_ensemble, &ensemble.g_sigma_ensemble) else {
        return Err(invalid("step_adversarial_style: ensemble gradient not aggregated"));
    };
    let kappa = draw_kappa(cfg, rng);
    Ok((sign_step(init, g_mu, g_sigma, kappa)?, kappa))
}

/// Re-styles `feature` to the constant style `adv`; stays differentiable in `feature`.
pub fn apply_adversarial(feature: &Tensor, adv: &Style) -> Result<Tensor> {
    restyle(feature, &adv.detach())
}

/// One Bernoulli(p_style) draw.
pub fn gate(cfg: &PerturbConfig, rng: &mut Rng) -> bool {
    rng.gen::<f64>() < cfg.p_style
}
