//! Multi-scale crop sampling, discrepancy scoring and crop selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::backbone::Backbone;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which end of the score distribution is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Highest discrepancy.
    Incoherent,
    /// Lowest discrepancy.
    Concept,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Incoherent, Strategy::Concept, Strategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Incoherent => "incoherent",
            Strategy::Concept => "concept",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown mining strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningConfig {
    /// Candidates per image.
    pub m: usize,
    /// Crops kept per image.
    pub k: usize,
    /// Area-fraction bands, cycled over candidates.
    pub scale_ranges: Vec<(f64, f64)>,
    pub aspect_range: (f64, f64),
    pub flip_prob: f64,
    pub strategy: Strategy,
    pub rng_seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            m: 8,
            k: 2,
            scale_ranges: vec![(0.2, 0.5), (0.5, 1.0)],
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            strategy: Strategy::Incoherent,
            rng_seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.m {
            return Err(invalid(format!("mining: need 1 <= k <= m, got k={} m={}", self.k, self.m)));
        }
        if self.scale_ranges.is_empty() {
            return Err(invalid("mining: no scale ranges"));
        }
        for &(lo, hi) in &self.scale_ranges {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(invalid(format!("mining: bad scale range ({lo}, {hi})")));
            }
        }
        let (a, b) = self.aspect_range;
        if !(a > 0.0 && a <= b) {
            return Err(invalid(format!("mining: bad aspect range ({a}, {b})")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid("mining: flip_prob outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CropCandidate {
    /// `(1, 3, S, S)` with `S` the source image extent.
    pub pixels: Tensor,
    pub source_index: usize,
    pub scale: f64,
    pub score: Option<f64>,
}

const MAX_RESAMPLES: usize = 10;

/// Draws `cfg.m` resized crops of `image` (`(3, H, W)` or `(1, 3, H, W)`).
pub fn sample_crops(image: &Tensor, source_index: usize, cfg: &MiningConfig, rng: &mut Rng) -> Result<Vec<CropCandidate>> {
    cfg.validate()?;
    let s = image.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(invalid(format!("sample_crops: expected one image, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(cfg.m);
    for i in 0..cfg.m {
        let (lo, hi) = cfg.scale_ranges[i % cfg.scale_ranges.len()];
        let mut window = None;
        for _ in 0..=MAX_RESAMPLES {
            let scale = rng.gen_range(lo..=hi);
            let aspect = rng.gen_range(cfg.aspect_range.0..=cfg.aspect_range.1);
            let area = scale * (h * w) as f64;
            let cw = ((area * aspect).sqrt().round() as usize).min(w);
            let ch = ((area / aspect).sqrt().round() as usize).min(h);
            if cw > 0 && ch > 0 {
                window = Some((scale, ch, cw));
                break;
            }
        }
        let (scale, ch, cw) =
            window.ok_or_else(|| invalid(format!("sample_crops: degenerate window after {MAX_RESAMPLES} resamples")))?;
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        let flip = rng.gen::<f64>() < cfg.flip_prob;
        let pixels = resize_window(image.data(), c, h, w, (y0, x0, ch, cw), (h, w), flip);
        out.push(CropCandidate {
            pixels: Tensor::new(vec![1, c, h, w], pixels)?,
            source_index,
            scale,
            score: None,
        });
    }
    Ok(out)
}

/// Bilinear resize of a window with half-pixel centres, optional mirror.
fn resize_window(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    (y0, x0, ch, cw): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    flip: bool,
) -> Vec<f64> {
    let coord = |o: usize, out: usize, len: usize, start: usize| {
        let p = (o as f64 + 0.5) * len as f64 / out as f64 - 0.5;
        let p = p.clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (start + i0, start + i1, p - i0 as f64)
    };
    let ys: Vec<_> = (0..oh).map(|o| coord(o, oh, ch, y0)).collect();
    let xs: Vec<_> = (0..ow).map(|o| coord(o, ow, cw, x0)).collect();
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for (oy, &(ya, yb, fy)) in ys.iter().enumerate() {
            for (ox, &(xa, xb, fx)) in xs.iter().enumerate() {
                let top = plane[ya * w + xa] * (1.0 - fx) + plane[ya * w + xb] * fx;
                let bot = plane[yb * w + xa] * (1.0 - fx) + plane[yb * w + xb] * fx;
                let tx = if flip { ow - 1 - ox } else { ox };
                out[(ci * oh + oy) * ow + tx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Per-row cross-entropy of constant logits.
pub fn row_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let ls = logits.detach().log_softmax()?;
    let n_c = ls.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            if y >= n_c {
                return Err(invalid(format!("label {y} outside [0, {n_c})")));
            }
            Ok(-ls.data()[r * n_c + y])
        })
        .collect()
}

/// Scores every crop by the global-head cross-entropy against `label`.
/// `backbone` should be bound without a tape.
pub fn score_crops(crops: Vec<CropCandidate>, label: usize, backbone: &Backbone) -> Result<Vec<CropCandidate>> {
    let labels = vec![label; crops.len()];
    score_batch(crops, &labels, backbone)
}

const SCORE_BATCH: usize = 64;

/// [`score_crops`] with one label per crop.
pub fn score_batch(mut crops: Vec<CropCandidate>, labels: &[usize], backbone: &Backbone) -> Result<Vec<CropCandidate>> {
    if crops.is_empty() {
        return Ok(crops);
    }
    if labels.len() != crops.len() {
        return Err(invalid(format!("score_crops: {} labels for {} crops", labels.len(), crops.len())));
    }
    let n_c = backbone.arch.num_classes;
    if let Some(&y) = labels.iter().find(|&&y| y >= n_c) {
        return Err(invalid(format!("score_crops: label {y} outside [0, {n_c})")));
    }
    // bounded batches keep activations cache-sized; rows are scored independently
    for (chunk, labels) in crops.chunks_mut(SCORE_BATCH).zip(labels.chunks(SCORE_BATCH)) {
        let batch = Tensor::concat_batch(&chunk.iter().map(|c| c.pixels.detach()).collect::<Vec<_>>())?;
        let logits = backbone.global_classify(&backbone.forward(&batch)?)?;
        for (crop, s) in chunk.iter_mut().zip(row_cross_entropy(&logits, labels)?) {
            crop.score = Some(s);
        }
    }
    Ok(crops)
}

/// Indices of the `k` crops kept by `strategy`. Ties go to the lower index.
pub fn select_indices(scores: &[f64], k: usize, strategy: Strategy, rng: &mut Rng) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(invalid(format!("select_crops: k={k} exceeds {} candidates", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match strategy {
        Strategy::Incoherent => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        Strategy::Concept => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
        Strategy::Random => {
            let mut pick = sample(rng, scores.len(), k).into_vec();
            pick.sort_unstable();
            return Ok(pick);
        }
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

pub fn select_crops(scored: Vec<CropCandidate>, cfg: &MiningConfig, rng: &mut Rng) -> Result<Vec<CropCandidate>> {
    let scores = scored
        .iter()
        .map(|c| c.score.ok_or_else(|| invalid("select_crops: unscored candidate")))
        .collect::<Result<Vec<_>>>()?;
    let keep = select_indices(&scores, cfg.k, cfg.strategy, rng)?;
    let mut scored: Vec<Option<CropCandidate>> = scored.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|i| scored[i].take().unwrap()).collect())
}

/// Mines `cfg.k` crops for every image of a `(B, 3, H, W)` batch and returns
/// them as `k` batches: batch `i` holds the `i`-th selected crop of each image.
pub fn mine_batch(
    images: &Tensor,
    labels: &[usize],
    cfg: &MiningConfig,
    backbone: &Backbone,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let b = images.shape()[0];
    if labels.len() != b {
        return Err(invalid(format!("mine_batch: {} labels for {b} images", labels.len())));
    }
    let mut candidates = Vec::with_capacity(b * cfg.m);
    let mut crop_labels = Vec::with_capacity(b * cfg.m);
    for (i, &y) in labels.iter().enumerate() {
        candidates.extend(sample_crops(&images.slice_batch(i, 1)?.detach(), i, cfg, rng)?);
        crop_labels.extend(std::iter::repeat(y).take(cfg.m));
    }
    // random selection ignores scores, so skip the forward pass
    if cfg.strategy != Strategy::Random {
        candidates = score_batch(candidates, &crop_labels, backbone)?;
    } else {
        for c in &mut candidates {
            c.score = Some(0.0);
        }
    }
    let mut slots: Vec<Vec<Tensor>> = vec![Vec::with_capacity(b); cfg.k];
    let mut it = candidates.into_iter();
    for _ in 0..b {
        let own: Vec<CropCandidate> = it.by_ref().take(cfg.m).collect();
        for (slot, crop) in slots.iter_mut().zip(select_crops(own, cfg, rng)?) {
            slot.push(crop.pixels);
        }
    }
    slots.iter().map(|s| Tensor::concat_batch(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Architecture, ModelParams};
    use crate::rng;

    fn image() -> Tensor {
        Tensor::new(vec![3, 32, 32], (0..3072).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect()).unwrap()
    }

    #[test]
    fn identity_crop() {
        let cfg = MiningConfig {
            m: 3,
            k: 1,
            scale_ranges: vec![(1.0, 1.0)],
            aspect_range: (1.0, 1.0),
            flip_prob: 0.0,
            ..Default::default()
        };
        let img = image();
        let crops = sample_crops(&img, 0, &cfg, &mut rng::stream(3, &[])).unwrap();
        for c in crops {
            assert_eq!(c.pixels.data(), img.data());
            assert_eq!(c.pixels.shape(), &[1, 3, 32, 32]);
        }
    }

    #[test]
    fn crops_are_deterministic_and_cycle_scales() {
        let cfg = MiningConfig::default();
        let a = sample_crops(&image(), 0, &cfg, &mut rng::stream(9, &[])).unwrap();
        let b = sample_crops(&image(), 0, &cfg, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a.len(), 8);
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert_eq!(x.pixels.data(), y.pixels.data());
            let (lo, hi) = cfg.scale_ranges[i % 2];
            assert!((lo..=hi).contains(&x.scale));
        }
        let low = a.iter().filter(|c| c.scale <= 0.5).count();
        assert!(low >= 4);
    }

    #[test]
    fn flip_mirrors_columns() {
        let base = MiningConfig {
            m: 1,
            k: 1,
            scale_ranges: vec![(1.0, 1.0)],
            aspect_range: (1.0, 1.0),
            flip_prob: 0.0,
            ..Default::default()
        };
        let flipped = MiningConfig { flip_prob: 1.0, ..base.clone() };
        let img = image();
        let a = sample_crops(&img, 0, &flipped, &mut rng::stream(1, &[])).unwrap();
        let d = a[0].pixels.data();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(d[y * 32 + x], img.data()[y * 32 + 31 - x]);
            }
        }
    }

    #[test]
    fn bilinear_matches_direct_formula() {
        // 4x4 window upsampled to 32x32: interior samples interpolate linearly
        let img = image();
        let out = resize_window(img.data(), 3, 32, 32, (5, 7, 4, 4), (32, 32), false);
        let p = |o: usize| ((o as f64 + 0.5) / 8.0 - 0.5).clamp(0.0, 3.0);
        for (oy, ox) in [(0, 0), (13, 20), (31, 31), (16, 3)] {
            let (py, px) = (p(oy), p(ox));
            let (y0, x0) = (py.floor() as usize, px.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
            let at = |y: usize, x: usize| img.data()[(5 + y) * 32 + 7 + x];
            let (fy, fx) = (py - y0 as f64, px - x0 as f64);
            let expect = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            assert!((out[oy * 32 + ox] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_score_ln12() {
        let logits = Tensor::zeros(&[2, 12]);
        let s = row_cross_entropy(&logits, &[0, 11]).unwrap();
        for v in s {
            assert!((v - 12f64.ln()).abs() < 1e-12);
        }
        let sure = Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap();
        assert!(row_cross_entropy(&sure, &[0]).unwrap()[0] < 1e-40);
    }

    #[test]
    fn scores_are_nonnegative() {
        let p = ModelParams::init(Architecture::default(), 1.0, 2).bind(None);
        let crops = sample_crops(&image(), 0, &MiningConfig::default(), &mut rng::stream(4, &[])).unwrap();
        let scored = score_crops(crops, 3, &p).unwrap();
        assert!(scored.iter().all(|c| c.score.unwrap() >= 0.0));
        let crops = sample_crops(&image(), 0, &MiningConfig::default(), &mut rng::stream(4, &[])).unwrap();
        assert!(score_crops(crops, 12, &p).is_err());
    }

    #[test]
    fn selection_examples() {
        let mut r = rng::stream(0, &[]);
        let s = [0.2, 1.5, 0.9];
        assert_eq!(select_indices(&s, 2, Strategy::Incoherent, &mut r).unwrap(), vec![1, 2]);
        assert_eq!(select_indices(&s, 2, Strategy::Concept, &mut r).unwrap(), vec![0, 2]);
        assert_eq!(select_indices(&[0.5; 4], 2, Strategy::Incoherent, &mut r).unwrap(), vec![0, 1]);
        assert!(select_indices(&s, 4, Strategy::Incoherent, &mut r).is_err());
        let pick = select_indices(&s, 2, Strategy::Random, &mut r).unwrap();
        assert_eq!(pick.len(), 2);
        assert!(pick[0] < pick[1]);
    }

    #[test]
    fn mine_batch_shapes_and_determinism() {
        let p = ModelParams::init(Architecture::default(), 1.0, 2).bind(None);
        let imgs = Tensor::concat_batch(&[image().reshape(&[1, 3, 32, 32]).unwrap(), image().map(|v| 1.0 - v).reshape(&[1, 3, 32, 32]).unwrap()]).unwrap();
        let cfg = MiningConfig::default();
        let a = mine_batch(&imgs, &[1, 4], &cfg, &p, &mut rng::stream(5, &[])).unwrap();
        let b = mine_batch(&imgs, &[1, 4], &cfg, &p, &mut rng::stream(5, &[])).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.shape(), &[2, 3, 32, 32]);
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn strategy_round_trips() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }
}
