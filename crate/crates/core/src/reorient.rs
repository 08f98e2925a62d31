//! Style gradients of global and crop features, cosine reorientation and the
//! decayed ensemble.

use crate::backbone::{Backbone, NUM_BLOCKS, STYLE_BLOCKS};
use crate::error::{invalid, Error, Result};
use crate::objectives::cross_entropy;
use crate::style::{adain_transfer, compute_style, Style, STYLE_EPS};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ReorientConfig {
    /// Weight of the crop term in the ensemble.
    pub xi: f64,
    /// Norms below this count as zero.
    pub norm_eps: f64,
}

impl Default for ReorientConfig {
    fn default() -> Self {
        ReorientConfig {
            xi: 0.1,
            norm_eps: 1e-12,
        }
    }
}

impl ReorientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0) {
            return Err(invalid("reorient: xi must be >= 0"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(invalid("reorient: norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Row-major `(B, C)` gradient block.
pub type Grad = Tensor;

#[derive(Clone, Debug)]
pub struct StyleGradientSet {
    pub g_mu_global: Grad,
    pub g_sigma_global: Grad,
    pub g_mu_crops: Vec<Grad>,
    pub g_sigma_crops: Vec<Grad>,
    /// Per crop, one cosine per sample.
    pub gamma_mu: Vec<Vec<f64>>,
    pub gamma_sigma: Vec<Vec<f64>>,
    pub g_mu_ensemble: Option<Grad>,
    pub g_sigma_ensemble: Option<Grad>,
}

impl StyleGradientSet {
    pub fn from_raw(g_mu_global: Grad, g_sigma_global: Grad, g_mu_crops: Vec<Grad>, g_sigma_crops: Vec<Grad>) -> Self {
        StyleGradientSet {
            g_mu_global,
            g_sigma_global,
            g_mu_crops,
            g_sigma_crops,
            gamma_mu: Vec::new(),
            gamma_sigma: Vec::new(),
            g_mu_ensemble: None,
            g_sigma_ensemble: None,
        }
    }

    pub fn k(&self) -> usize {
        self.g_mu_crops.len()
    }
}

/// Gradients of `CE(global) + sum_i CE(crop_i)` with respect to the style of
/// each member's block-`j` feature.
///
/// Each feature is rewritten as `(F - mu) / sigma * sigma_leaf + mu_leaf`
/// with constant statistics and fresh leaves equal to them, so the forward
/// value is unchanged; blocks `j+1..=4` and the global head then run with
/// `backbone`'s parameters as constants.
pub fn extract_style_gradients(
    backbone: &Backbone,
    global_feature: &Tensor,
    crop_features: &[Tensor],
    labels: &[usize],
    j: usize,
    k: usize,
) -> Result<StyleGradientSet> {
    if !(1..=STYLE_BLOCKS).contains(&j) {
        return Err(invalid(format!("style gradients only exist for blocks 1..={STYLE_BLOCKS}, got {j}")));
    }
    if crop_features.len() != k {
        return Err(invalid(format!("expected {k} crop features, got {}", crop_features.len())));
    }
    let b = global_feature.shape()[0];
    for f in crop_features {
        if f.shape() != global_feature.shape() {
            return Err(Error::ShapeMismatch {
                op: "extract_style_gradients",
                lhs: global_feature.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
    }
    let tape = Tape::new();
    let mut leaves = Vec::with_capacity(k + 1);
    let mut restyled = Vec::with_capacity(k + 1);
    for f in std::iter::once(global_feature).chain(crop_features) {
        let f = f.detach();
        let own = compute_style(&f, STYLE_EPS)?;
        let leaf = Style {
            mu: tape.leaf(&own.mu),
            sigma: tape.leaf(&own.sigma),
            eps: STYLE_EPS,
        };
        restyled.push(adain_transfer(&f, &own, &leaf)?);
        leaves.push(leaf);
    }
    let batch = Tensor::concat_batch(&restyled)?;
    let logits = backbone.global_classify(&backbone.forward_range(&batch, j + 1, NUM_BLOCKS)?)?;
    let mut loss: Option<Tensor> = None;
    for m in 0..=k {
        let ce = cross_entropy(&logits.slice_batch(m * b, b)?, labels)?;
        loss = Some(match loss {
            None => ce,
            Some(acc) => acc.add(&ce)?,
        });
    }
    let grads = tape.backward(&loss.expect("at least the global member"))?;
    let mut mu: Vec<Grad> = leaves.iter().map(|l| grads.wrt(&l.mu)).collect();
    let mut sigma: Vec<Grad> = leaves.iter().map(|l| grads.wrt(&l.sigma)).collect();
    let (g_mu, g_sigma) = (mu.remove(0), sigma.remove(0));
    Ok(StyleGradientSet::from_raw(g_mu, g_sigma, mu, sigma))
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, c] => Ok((b, c)),
        _ => Err(invalid(format!("expected a (B, C) gradient, got {:?}", t.shape()))),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Per-sample cosine between crop and global gradients; zero for a crop row
/// whose norm is below `norm_eps`. A global row below `norm_eps` is a
/// [`Error::DegenerateGradient`].
pub fn cosine_gamma(g_crop: &Grad, g_global: &Grad, norm_eps: f64) -> Result<Vec<f64>> {
    let (b, c) = rows(g_global)?;
    if g_crop.shape() != g_global.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_gamma",
            lhs: g_crop.shape().to_vec(),
            rhs: g_global.shape().to_vec(),
        });
    }
    (0..b)
        .map(|r| {
            let (x, g) = (&g_crop.data()[r * c..(r + 1) * c], &g_global.data()[r * c..(r + 1) * c]);
            let ng = norm(g);
            if ng < norm_eps {
                return Err(Error::DegenerateGradient(ng));
            }
            let nx = norm(x);
            if nx < norm_eps {
                return Ok(0.0);
            }
            Ok((dot(x, g) / (nx * ng)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Per-sample L2 normalisation over channels; zero rows stay zero.
pub fn normalize_rows(v: &Grad) -> Result<Grad> {
    let (_, c) = rows(v)?;
    let mut out = v.to_vec();
    for row in out.chunks_mut(c) {
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

/// `gamma[b] * g[b, :]` for every sample `b`.
pub fn rectify(g: &Grad, gamma: &[f64]) -> Result<Grad> {
    let (b, c) = rows(g)?;
    if gamma.len() != b {
        return Err(invalid(format!("rectify: {} gammas for {b} rows", gamma.len())));
    }
    let out = g.data().iter().enumerate().map(|(i, &x)| gamma[i / c] * x).collect();
    Tensor::new(g.shape().to_vec(), out)
}

/// Fills in both gamma sets from the raw gradients.
pub fn compute_gammas(set: &mut StyleGradientSet, cfg: &ReorientConfig) -> Result<()> {
    set.gamma_mu = set
        .g_mu_crops
        .iter()
        .map(|g| cosine_gamma(g, &set.g_mu_global, cfg.norm_eps))
        .collect::<Result<_>>()?;
    set.gamma_sigma = set
        .g_sigma_crops
        .iter()
        .map(|g| cosine_gamma(g, &set.g_sigma_global, cfg.norm_eps))
        .collect::<Result<_>>()?;
    Ok(())
}

fn ensemble(global: &Grad, crops: &[Grad], gammas: &[Vec<f64>], xi: f64) -> Result<Grad> {
    let g = normalize_rows(global)?;
    if crops.is_empty() {
        return Ok(g);
    }
    let mut mean = vec![0.0; global.numel()];
    for (crop, gamma) in crops.iter().zip(gammas) {
        for (m, r) in mean.iter_mut().zip(rectify(crop, gamma)?.data()) {
            *m += r;
        }
    }
    let k = crops.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let g_c = normalize_rows(&Tensor::new(global.shape().to_vec(), mean)?)?;
    let out = g.data().iter().zip(g_c.data()).map(|(a, b)| a + xi * b).collect();
    Tensor::new(global.shape().to_vec(), out)
}

/// `G_e = Norm(g_global) + xi * Norm(mean_i gamma_i * g_i)` for mu and sigma.
pub fn rectify_and_aggregate(mut set: StyleGradientSet, cfg: &ReorientConfig) -> Result<StyleGradientSet> {
    cfg.validate()?;
    let k = set.k();
    if set.g_sigma_crops.len() != k || set.gamma_mu.len() != k || set.gamma_sigma.len() != k {
        return Err(invalid("rectify_and_aggregate: gammas not populated for every crop"));
    }
    set.g_mu_ensemble = Some(ensemble(&set.g_mu_global, &set.g_mu_crops, &set.gamma_mu, cfg.xi)?);
    set.g_sigma_ensemble = Some(ensemble(&set.g_sigma_global, &set.g_sigma_crops, &set.gamma_sigma, cfg.xi)?);
    Ok(set)
}

/// Gammas followed by aggregation.
pub fn reorient(mut set: StyleGradientSet, cfg: &ReorientConfig) -> Result<StyleGradientSet> {
    compute_gammas(&mut set, cfg)?;
    rectify_and_aggregate(set, cfg)
}
