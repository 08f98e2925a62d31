//! Feature statistics and AdaIN style transfer.

use crate::backbone::{Backbone, BlockOutput, NUM_BLOCKS, STYLE_BLOCKS};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Variance floor added under the square root of every style sigma.
pub const STYLE_EPS: f64 = 1e-5;

/// Per-(sample, channel) mean and standard deviation of a feature map.
#[derive(Clone, Debug)]
pub struct Style {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub eps: f64,
}

impl Style {
    pub fn detach(&self) -> Style {
        Style {
            mu: self.mu.detach(),
            sigma: self.sigma.detach(),
            eps: self.eps,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }
}

/// `mu = mean_hw(F)`, `sigma = sqrt(var_hw(F) + eps)` with the biased variance.
pub fn compute_style(feature: &Tensor, eps: f64) -> Result<Style> {
    if feature.rank() != 4 {
        return Err(invalid(format!(
            "compute_style: expected (B, C, H, W), got {:?}",
            feature.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(invalid("compute_style: eps must be positive"));
    }
    let mu = feature.spatial_mean()?;
    let sigma = feature.spatial_var()?.affine(1.0, eps)?.sqrt()?;
    Ok(Style { mu, sigma, eps })
}

/// `(F - source.mu) / source.sigma * target.sigma + target.mu`, statistics
/// broadcast over (H, W).
pub fn adain_transfer(feature: &Tensor, source: &Style, target: &Style) -> Result<Tensor> {
    if feature.rank() != 4 {
        return Err(invalid("adain_transfer: feature must be rank 4"));
    }
    let bc = &feature.shape()[..2];
    for s in [&source.mu, &source.sigma, &target.mu, &target.sigma] {
        if s.shape() != bc {
            return Err(Error::ShapeMismatch {
                op: "adain_transfer",
                lhs: feature.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
    }
    let (h, w) = (feature.shape()[2], feature.shape()[3]);
    feature
        .sub(&source.mu.broadcast_hw(h, w)?)?
        .div(&source.sigma.broadcast_hw(h, w)?)?
        .mul(&target.sigma.broadcast_hw(h, w)?)?
        .add(&target.mu.broadcast_hw(h, w)?)
}

/// Replaces the style of `feature` with `target`.
pub fn restyle(feature: &Tensor, target: &Style) -> Result<Tensor> {
    let own = compute_style(feature, target.eps)?;
    adain_transfer(feature, &own, target)
}

/// Runs blocks `from..=to` from `input`, substituting the output style of
/// every block `i` for which `styles[i - 1]` is `Some`.
pub fn chained_range(
    backbone: &Backbone,
    input: &Tensor,
    from: usize,
    to: usize,
    styles: &[Option<Style>],
) -> Result<BlockOutput> {
    if styles.len() > STYLE_BLOCKS {
        return Err(invalid(format!(
            "adversarial style given for block {} (only blocks 1..={STYLE_BLOCKS} are hooked)",
            styles.len()
        )));
    }
    if !(1..=NUM_BLOCKS).contains(&from) || to < from || to > NUM_BLOCKS {
        return Err(invalid(format!("bad block range {from}..={to}")));
    }
    let mut feature = input.clone();
    for j in from..=to {
        let out = backbone.forward_block(&feature, j)?;
        feature = match styles.get(j - 1) {
            Some(Some(style)) => restyle(&out.feature, style)?,
            _ => out.feature,
        };
    }
    Ok(BlockOutput {
        feature,
        block_index: to,
    })
}

/// Forward of the image batch to block `j`, with the output style of each
/// block `i <= j` replaced by `adv_styles[i - 1]` when present.
pub fn chained_forward(
    backbone: &Backbone,
    images: &Tensor,
    adv_styles: &[Option<Style>],
    j: usize,
) -> Result<BlockOutput> {
    chained_range(backbone, images, 1, j, adv_styles)
}
