//! Procedural multi-domain images and N-way K-shot episodes.
//!
//! Every image is a pure function of `(class_id, instance_seed, domain)`.
//! Classes are shape families (disk, ring, stripes, ...) drawn with jittered
//! pose and colour; a domain then applies a per-channel contrast/offset, a
//! periodic texture and pixel noise. Source classes and target classes are
//! disjoint id ranges.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::io::{self, NamedTensor};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_SOURCE_CLASSES: usize = 12;
pub const NUM_TARGET_CLASSES: usize = 8;
/// Instances available per class, like a fixed labelled dataset.
pub const INSTANCES_PER_CLASS: usize = 600;

const SHAPE_FAMILIES: usize = 10;
const DATASET_SEED: u64 = 0x5352_5350;

pub fn source_classes() -> std::ops::Range<usize> {
    0..NUM_SOURCE_CLASSES
}

pub fn target_classes() -> std::ops::Range<usize> {
    NUM_SOURCE_CLASSES..NUM_SOURCE_CLASSES + NUM_TARGET_CLASSES
}

/// Appearance shift applied on top of the base rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub channel_shift: [f64; 3],
    pub channel_scale: [f64; 3],
    pub texture_amp: f64,
    /// Texture frequency in cycles per image along x and y.
    pub texture_freq: [f64; 2],
    pub noise_std: f64,
}

impl DomainSpec {
    pub fn source() -> Self {
        DomainSpec {
            domain_id: 0,
            name: "source".into(),
            channel_shift: [0.0; 3],
            channel_scale: [1.0; 3],
            texture_amp: 0.0,
            texture_freq: [0.0, 0.0],
            noise_std: 0.0,
        }
    }

    /// Four target domains of increasing severity.
    pub fn targets() -> Vec<Self> {
        let mk = |id, name: &str, shift, scale, amp, freq, noise| DomainSpec {
            domain_id: id,
            name: name.into(),
            channel_shift: shift,
            channel_scale: scale,
            texture_amp: amp,
            texture_freq: freq,
            noise_std: noise,
        };
        vec![
            mk(1, "mild", [0.08, -0.05, 0.04], [0.9, 1.05, 0.95], 0.03, [3.0, 1.0], 0.02),
            mk(2, "moderate", [-0.12, 0.10, 0.15], [0.75, 1.15, 0.85], 0.06, [1.0, 4.0], 0.04),
            mk(3, "strong", [0.20, -0.15, -0.10], [0.6, 0.8, 1.3], 0.09, [5.0, 2.0], 0.06),
            mk(4, "severe", [-0.20, 0.25, -0.20], [0.5, 1.4, 0.6], 0.12, [2.0, 6.0], 0.08),
        ]
    }

    pub fn all() -> Vec<Self> {
        let mut v = vec![Self::source()];
        v.extend(Self::targets());
        v
    }

    /// Looks up a domain by id or name.
    pub fn lookup(key: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|d| d.name == key || d.domain_id.to_string() == key)
            .ok_or_else(|| invalid(format!("unknown domain {key:?}")))
    }

    pub fn is_source(&self) -> bool {
        self.domain_id == 0
    }

    pub fn classes(&self) -> std::ops::Range<usize> {
        if self.is_source() {
            source_classes()
        } else {
            target_classes()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_scale.iter().any(|&s| s <= 0.0) {
            return Err(invalid(format!("domain {}: channel_scale must be positive", self.name)));
        }
        if self.texture_amp < 0.0 || self.noise_std < 0.0 {
            return Err(invalid(format!("domain {}: negative texture or noise", self.name)));
        }
        Ok(())
    }
}

/// Seed of instance `index` of `class_id`, shared across domains.
pub fn instance_seed(class_id: usize, index: usize) -> u64 {
    rng::derive(DATASET_SEED, &[class_id as u64, index as u64])
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    cos: f64,
    sin: f64,
}

fn inside(family: usize, variant: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    let box_norm = u.abs().max(v.abs());
    let period = if variant == 0 { 2.5 } else { 5.0 };
    match family {
        0 => r2 <= 1.0,
        1 => {
            let inner = if variant == 0 { 0.6 } else { 0.8 };
            r2 <= 1.0 && r2 >= inner * inner
        }
        2 => box_norm <= 0.85,
        3 => (0.55..=0.85).contains(&box_norm),
        4 => v <= 0.6 && u.abs() <= (v + 1.0) * 0.5,
        5 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        6 => box_norm <= 0.9 && ((v + 1.0) * period).floor() as i64 % 2 == 0,
        7 => box_norm <= 0.9 && ((u + 1.0) * period).floor() as i64 % 2 == 0,
        8 => {
            let cells = if variant == 0 { 2.0 } else { 3.0 };
            box_norm <= 0.9 && (((u + 1.0) * cells).floor() + ((v + 1.0) * cells).floor()) as i64 % 2 == 0
        }
        _ => (u - 0.5).powi(2) + v * v <= 0.16 || (u + 0.5).powi(2) + v * v <= 0.16,
    }
}

/// Base rendering (no domain style), values in [0, 1], layout (3, 32, 32).
fn render_base(class_id: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[class_id as u64, rng::tag("shape")]);
    let family = class_id % SHAPE_FAMILIES;
    let variant = class_id / SHAPE_FAMILIES;
    let size = if variant == 0 || family >= 6 { 9.5 } else { 6.5 };
    let theta: f64 = r.gen_range(-0.3..0.3);
    let pose = Pose {
        cx: 16.0 + r.gen_range(-3.0..3.0),
        cy: 16.0 + r.gen_range(-3.0..3.0),
        radius: size * r.gen_range(0.85..1.15),
        cos: theta.cos(),
        sin: theta.sin(),
    };
    let grey: f64 = r.gen_range(0.15..0.35);
    let bg: [f64; 3] = std::array::from_fn(|_| grey + r.gen_range(-0.05..0.05));
    let fg: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.55..0.95));

    let n = IMAGE_SIZE;
    let mut img = vec![0.0; CHANNELS * n * n];
    for y in 0..n {
        for x in 0..n {
            // 2x2 supersampled coverage
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = x as f64 + ox - pose.cx;
                let dy = y as f64 + oy - pose.cy;
                let u = (pose.cos * dx + pose.sin * dy) / pose.radius;
                let v = (-pose.sin * dx + pose.cos * dy) / pose.radius;
                if inside(family, variant, u, v) {
                    cover += 0.25;
                }
            }
            for c in 0..CHANNELS {
                img[(c * n + y) * n + x] = cover * fg[c] + (1.0 - cover) * bg[c];
            }
        }
    }
    img
}

/// Renders one `(3, 32, 32)` image of `class_id` under `domain`.
pub fn render_image(class_id: usize, instance_seed: u64, domain: &DomainSpec) -> Result<Tensor> {
    if class_id >= NUM_SOURCE_CLASSES + NUM_TARGET_CLASSES {
        return Err(invalid(format!("class id {class_id} out of range")));
    }
    domain.validate()?;
    let mut img = render_base(class_id, instance_seed);
    let n = IMAGE_SIZE;
    let mut r = rng::stream(instance_seed, &[class_id as u64, domain.domain_id as u64, rng::tag("style")]);
    let phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    for c in 0..CHANNELS {
        let (s, shift) = (domain.channel_scale[c], domain.channel_shift[c]);
        let offset = 0.5 * (1.0 - s) + shift;
        for y in 0..n {
            for x in 0..n {
                let arg = std::f64::consts::TAU
                    * (domain.texture_freq[0] * x as f64 + domain.texture_freq[1] * y as f64)
                    / n as f64
                    + phase;
                let texture = domain.texture_amp * arg.sin();
                let z: f64 = StandardNormal.sample(&mut r);
                let p = &mut img[(c * n + y) * n + x];
                *p = (*p * s + offset + texture + domain.noise_std * z).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![CHANNELS, n, n], img)
}

/// An N-way K-shot task with M queries per class.
#[derive(Clone, Debug)]
pub struct Episode {
    /// `(N*K, 3, 32, 32)`, class-major.
    pub support: Tensor,
    /// Episode-local labels in `[0, N)`.
    pub support_labels: Vec<usize>,
    /// `(N*M, 3, 32, 32)`, class-major.
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// Global class id of each episode-local label.
    pub classes: Vec<usize>,
    pub support_seeds: Vec<u64>,
    pub query_seeds: Vec<u64>,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub domain_id: usize,
}

impl Episode {
    pub fn support_classes(&self) -> Vec<usize> {
        self.support_labels.iter().map(|&l| self.classes[l]).collect()
    }

    pub fn query_classes(&self) -> Vec<usize> {
        self.query_labels.iter().map(|&l| self.classes[l]).collect()
    }

    /// Support followed by query: the batch every forward pass runs on.
    pub fn images(&self) -> Result<Tensor> {
        Tensor::concat_batch(&[self.support.clone(), self.query.clone()])
    }

    /// Global class ids of [`Episode::images`].
    pub fn image_classes(&self) -> Vec<usize> {
        let mut v = self.support_classes();
        v.extend(self.query_classes());
        v
    }
}

/// Instance indices drawn for one episode, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    pub classes: Vec<usize>,
    /// Per class, K + M distinct instance indices; the first K are support.
    pub instances: Vec<Vec<usize>>,
}

pub fn plan_episode(n: usize, k: usize, m: usize, domain: &DomainSpec, rng: &mut Rng) -> Result<EpisodePlan> {
    let pool = domain.classes();
    if n == 0 || k == 0 || m == 0 {
        return Err(invalid("episode needs N, K, M >= 1"));
    }
    if n > pool.len() {
        return Err(invalid(format!("{n}-way episode but domain {} has {} classes", domain.name, pool.len())));
    }
    if k + m > INSTANCES_PER_CLASS {
        return Err(invalid("K + M exceeds instances per class"));
    }
    let classes: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool.start + i).collect();
    let instances = classes
        .iter()
        .map(|_| sample(rng, INSTANCES_PER_CLASS, k + m).into_vec())
        .collect();
    Ok(EpisodePlan { classes, instances })
}

/// Samples N classes without replacement and K + M distinct instances per class.
pub fn sample_episode(n: usize, k: usize, m: usize, domain: &DomainSpec, rng: &mut Rng) -> Result<Episode> {
    let plan = plan_episode(n, k, m, domain, rng)?;
    render_plan(&plan, k, m, domain)
}

pub fn render_plan(plan: &EpisodePlan, k: usize, m: usize, domain: &DomainSpec) -> Result<Episode> {
    let n = plan.classes.len();
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * m);
    let (mut support_labels, mut query_labels) = (Vec::new(), Vec::new());
    let (mut support_seeds, mut query_seeds) = (Vec::new(), Vec::new());
    for (label, (&class, idx)) in plan.classes.iter().zip(&plan.instances).enumerate() {
        for (j, &i) in idx.iter().enumerate() {
            let seed = instance_seed(class, i);
            let img = render_image(class, seed, domain)?.reshape(&[1, CHANNELS, IMAGE_SIZE, IMAGE_SIZE])?;
            if j < k {
                support.push(img);
                support_labels.push(label);
                support_seeds.push(seed);
            } else {
                query.push(img);
                query_labels.push(label);
                query_seeds.push(seed);
            }
        }
    }
    Ok(Episode {
        support: Tensor::concat_batch(&support)?,
        support_labels,
        query: Tensor::concat_batch(&query)?,
        query_labels,
        classes: plan.classes.clone(),
        support_seeds,
        query_seeds,
        n_way: n,
        k_shot: k,
        m_query: m,
        domain_id: domain.domain_id,
    })
}

/// Writes `per_class` images of every class of each domain as SRSP files
/// plus `manifest.csv` (file, class_id, domain_id, seed).
pub fn export_dataset(dir: &Path, domains: &[DomainSpec], per_class: usize) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("file,class_id,domain_id,seed\n");
    let mut count = 0;
    for d in domains {
        for class in d.classes() {
            for idx in 0..per_class {
                let seed = instance_seed(class, idx);
                let img = render_image(class, seed, d)?;
                let file = format!("d{}_c{:02}_{:04}.srsp", d.domain_id, class, idx);
                io::save(
                    dir.join(&file),
                    &[NamedTensor::new("image", img.shape().to_vec(), img.to_vec())],
                )?;
                writeln!(manifest, "{file},{class},{},{seed}", d.domain_id).unwrap();
                count += 1;
            }
        }
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_mean(img: &Tensor, c: usize) -> f64 {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        img.data()[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64
    }

    #[test]
    fn render_is_deterministic() {
        let d = DomainSpec::targets()[2].clone();
        let a = render_image(3, 77, &d).unwrap();
        let b = render_image(3, 77, &d).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_style_equals_base_bitwise() {
        let mut d = DomainSpec::targets()[1].clone();
        d.channel_shift = [0.0; 3];
        d.channel_scale = [1.0; 3];
        d.texture_amp = 0.0;
        d.noise_std = 0.0;
        for class in [0, 7, 15] {
            let a = render_image(class, 5, &d).unwrap();
            assert_eq!(a.to_vec(), render_base(class, 5));
        }
    }

    #[test]
    fn red_shift_raises_red_mean() {
        let mut shifted = DomainSpec::source();
        shifted.channel_shift = [0.3, 0.0, 0.0];
        let mut diff = 0.0;
        for i in 0..100 {
            let seed = instance_seed(i % 12, i);
            let a = render_image(i % 12, seed, &DomainSpec::source()).unwrap();
            let b = render_image(i % 12, seed, &shifted).unwrap();
            diff += channel_mean(&b, 0) - channel_mean(&a, 0);
        }
        let diff = diff / 100.0;
        assert!((diff - 0.3).abs() < 0.05, "{diff}");
    }

    #[test]
    fn class_ranges_are_disjoint() {
        let s: Vec<_> = source_classes().collect();
        assert!(target_classes().all(|c| !s.contains(&c)));
        assert!(render_image(20, 0, &DomainSpec::source()).is_err());
    }

    #[test]
    fn episode_contract() {
        let mut r = rng::stream(1, &[]);
        let ep = sample_episode(5, 1, 15, &DomainSpec::source(), &mut r).unwrap();
        assert_eq!(ep.support.shape(), &[5, 3, 32, 32]);
        assert_eq!(ep.query.shape(), &[75, 3, 32, 32]);
        assert_eq!(ep.support_labels, vec![0, 1, 2, 3, 4]);
        assert!(ep.query_labels.iter().all(|&l| l < 5));
        for l in 0..5 {
            assert_eq!(ep.query_labels.iter().filter(|&&q| q == l).count(), 15);
        }
        assert!(ep.support_seeds.iter().all(|s| !ep.query_seeds.contains(s)));
        assert!(ep.classes.iter().all(|c| source_classes().contains(c)));

        let mut r2 = rng::stream(1, &[]);
        let again = sample_episode(5, 1, 15, &DomainSpec::source(), &mut r2).unwrap();
        assert_eq!(again.query.data(), ep.query.data());
        assert_eq!(again.classes, ep.classes);
    }

    #[test]
    fn episode_rejects_too_many_ways() {
        let mut r = rng::stream(1, &[]);
        assert!(sample_episode(9, 1, 1, &DomainSpec::targets()[0], &mut r).is_err());
    }

    #[test]
    fn target_styles_shift_statistics() {
        for d in DomainSpec::targets() {
            for c in 0..3 {
                let (mut src, mut tgt) = (0.0, 0.0);
                for i in 0..40 {
                    let class = target_classes().start + i % 8;
                    let seed = instance_seed(class, i);
                    src += channel_mean(&render_image(class, seed, &DomainSpec::source()).unwrap(), c);
                    tgt += channel_mean(&render_image(class, seed, &d).unwrap(), c);
                }
                let moved = ((tgt - src) / 40.0).abs();
                // contrast scaling moves the mean too, so only the shift is a lower bound
                let slack = 0.03;
                let expect = (d.channel_shift[c] + 0.5 * (1.0 - d.channel_scale[c])).abs();
                assert!(moved + slack >= expect.min(d.channel_shift[c].abs()), "{} c{c}: {moved}", d.name);
            }
        }
    }

    #[test]
    fn export_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let n = export_dataset(dir.path(), &[DomainSpec::targets()[0].clone()], 2).unwrap();
        assert_eq!(n, 16);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let lines: Vec<&str> = manifest.lines().collect();
        assert_eq!(lines[0], "file,class_id,domain_id,seed");
        assert_eq!(lines.len(), 17);
        let first: Vec<&str> = lines[1].split(',').collect();
        let t = io::load(dir.path().join(first[0])).unwrap();
        assert_eq!(t[0].shape, vec![3, 32, 32]);
        let img = render_image(first[1].parse().unwrap(), first[3].parse().unwrap(), &DomainSpec::targets()[0]).unwrap();
        assert_eq!(t[0].data, img.to_vec());
    }
}
