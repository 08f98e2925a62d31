//! Few-shot evaluation on frozen parameters.

use std::collections::HashMap;

use crate::backbone::{proto_classify, ModelParams};
use crate::data::{instance_seed, plan_episode, render_image, DomainSpec, EpisodePlan, CHANNELS, IMAGE_SIZE};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainAccuracy {
    pub domain: String,
    pub domain_id: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    /// Percent.
    pub acc_mean: f64,
    /// `1.96 * std / sqrt(episodes)`, percent.
    pub acc_ci95: f64,
}

/// Mean and 95% half-width of per-episode accuracies (population std).
pub fn mean_ci95(acc: &[f64]) -> (f64, f64) {
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

const EMBED_BATCH: usize = 128;

/// Embeddings of rendered instances, computed once per `(class, index)`.
struct EmbeddingCache<'a> {
    params: &'a ModelParams,
    domain: &'a DomainSpec,
    dim: usize,
    store: HashMap<(usize, usize), Vec<f64>>,
}

impl<'a> EmbeddingCache<'a> {
    fn fill(&mut self, plan: &EpisodePlan) -> Result<()> {
        let mut missing: Vec<(usize, usize)> = Vec::new();
        for (&class, idx) in plan.classes.iter().zip(&plan.instances) {
            for &i in idx {
                if !self.store.contains_key(&(class, i)) && !missing.contains(&(class, i)) {
                    missing.push((class, i));
                }
            }
        }
        let bb = self.params.bind(None);
        for chunk in missing.chunks(EMBED_BATCH) {
            let mut pixels = Vec::with_capacity(chunk.len() * CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
            for &(class, i) in chunk {
                pixels.extend_from_slice(render_image(class, instance_seed(class, i), self.domain)?.data());
            }
            let batch = Tensor::new(vec![chunk.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], pixels)?;
            let emb = bb.embed(&bb.forward(&batch)?)?;
            for (row, key) in emb.data().chunks(self.dim).zip(chunk) {
                self.store.insert(*key, row.to_vec());
            }
        }
        Ok(())
    }

    fn gather(&self, keys: &[(usize, usize)]) -> Result<Tensor> {
        let data = keys.iter().flat_map(|k| self.store[k].iter().copied()).collect();
        Tensor::new(vec![keys.len(), self.dim], data)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of the prototype head over `episodes` random N-way K-shot tasks
/// per domain. Parameters are only read; no style perturbation is applied.
pub fn evaluate(
    params: &ModelParams,
    domains: &[DomainSpec],
    episodes: usize,
    n: usize,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<DomainAccuracy>> {
    let mut out = Vec::with_capacity(domains.len());
    for domain in domains {
        let mut cache = EmbeddingCache {
            params,
            domain,
            dim: params.arch.embed_dim(),
            store: HashMap::new(),
        };
        let mut acc = Vec::with_capacity(episodes);
        for e in 0..episodes {
            let mut r = rng::stream(seed, &[rng::tag("eval"), domain.domain_id as u64, e as u64]);
            let plan = plan_episode(n, k, m, domain, &mut r)?;
            cache.fill(&plan)?;
            let (mut support, mut query) = (Vec::new(), Vec::new());
            let (mut s_labels, mut q_labels) = (Vec::new(), Vec::new());
            for (label, (&class, idx)) in plan.classes.iter().zip(&plan.instances).enumerate() {
                for (j, &i) in idx.iter().enumerate() {
                    if j < k {
                        support.push((class, i));
                        s_labels.push(label);
                    } else {
                        query.push((class, i));
                        q_labels.push(label);
                    }
                }
            }
            let logits = proto_classify(&cache.gather(&support)?, &s_labels, &cache.gather(&query)?, n, params.proto_temp)?;
            let correct = logits
                .data()
                .chunks(n)
                .zip(&q_labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            acc.push(100.0 * correct as f64 / q_labels.len() as f64);
        }
        let (acc_mean, acc_ci95) = mean_ci95(&acc);
        out.push(DomainAccuracy {
            domain: domain.name.clone(),
            domain_id: domain.domain_id,
            n_way: n,
            k_shot: k,
            episodes,
            acc_mean,
            acc_ci95,
        });
    }
    Ok(out)
}

/// Mean accuracy over the given per-domain results.
pub fn mean_accuracy(results: &[DomainAccuracy]) -> f64 {
    results.iter().map(|r| r.acc_mean).sum::<f64>() / results.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Architecture;

    #[test]
    fn ci_formula() {
        let (m, ci) = mean_ci95(&[20.0, 40.0]);
        assert_eq!(m, 30.0);
        assert!((ci - 1.96 * 10.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_read_only() {
        let p = ModelParams::init(Architecture::default(), 1.0, 3);
        let before = p.checksum();
        let d = vec![DomainSpec::targets()[0].clone()];
        let a = evaluate(&p, &d, 5, 5, 1, 3, 9).unwrap();
        let b = evaluate(&p, &d, 5, 5, 1, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.checksum(), before);
        assert!((0.0..=100.0).contains(&a[0].acc_mean));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
