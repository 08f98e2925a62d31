//! Multi-method, multi-seed comparison runs.

use std::time::Duration;

use crate::data::DomainSpec;
use crate::error::Result;
use crate::harness::config::{Method, TrainConfig};
use crate::harness::eval::{evaluate, mean_accuracy, DomainAccuracy};
use crate::harness::landscape::{landscape_episodes, probe_landscape, Landscape};
use crate::harness::trainer::{baseline_loss, train, TrainOutcome};
use crate::rng;

/// Settings of the 1-D sharpness probe taken after each run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub radius: f64,
    pub steps: usize,
    pub episodes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            radius: 0.5,
            steps: 21,
            episodes: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub method: Method,
    pub seed: u64,
    pub domains: Vec<DomainAccuracy>,
    /// Mean accuracy over the target domains, percent.
    pub target_acc: f64,
    /// Gradient cosine of the final epoch.
    pub final_stability: Option<f64>,
    pub sharpness: f64,
    pub wall_clock: Duration,
}

/// Landscape of `L_cls + L_fsl` on fixed source episodes. Episodes and
/// directions depend on `seed` only, so runs of different methods with the
/// same seed are probed identically.
pub fn sharpness_probe(outcome: &TrainOutcome, cfg: &TrainConfig, probe: &ProbeConfig) -> Result<Landscape> {
    let seed = rng::derive(cfg.master_seed, &[rng::tag("probe")]);
    let eps = landscape_episodes(seed, probe.episodes, cfg.n_way, cfg.k_shot, cfg.m_query)?;
    let loss = |p: &crate::backbone::ModelParams| -> Result<f64> {
        let mut s = 0.0;
        for e in &eps {
            s += baseline_loss(p, e)?;
        }
        Ok(s / eps.len() as f64)
    };
    probe_landscape(&outcome.params, loss, 1, probe.radius, probe.steps, seed)
}

/// Trains, evaluates on the target domains and probes sharpness.
pub fn run_one(base: &TrainConfig, method: Method, seed: u64, probe: &ProbeConfig) -> Result<(AblationRun, TrainOutcome)> {
    let cfg = base.clone().with_method(method).with_seed(seed);
    let outcome = train(&cfg)?;
    let eval_seed = rng::derive(seed, &[rng::tag("eval")]);
    let domains = evaluate(
        &outcome.params,
        &DomainSpec::targets(),
        cfg.eval_episodes,
        cfg.n_way,
        cfg.eval_k_shot,
        cfg.m_query,
        eval_seed,
    )?;
    let sharpness = sharpness_probe(&outcome, &cfg, probe)?.sharpness();
    let run = AblationRun {
        method,
        seed,
        target_acc: mean_accuracy(&domains),
        domains,
        final_stability: outcome.epoch_stability.last().copied().flatten(),
        sharpness,
        wall_clock: outcome.wall_clock,
    };
    Ok((run, outcome))
}

/// Every method on every seed; `progress` sees each run as it finishes.
pub fn ablate(
    base: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    probe: &ProbeConfig,
    mut progress: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::with_capacity(methods.len() * seeds.len());
    for &method in methods {
        for &seed in seeds {
            let (run, _) = run_one(base, method, seed, probe)?;
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Seed-mean of `f` over the runs of `method`.
pub fn seed_mean(runs: &[AblationRun], method: Method, f: impl Fn(&AblationRun) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = runs.iter().filter(|r| r.method == method).filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn ablation_csv(runs: &[AblationRun]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["method".to_string(), "strategy".into(), "seed".into(), "target_acc".into()];
        if let Some(r) = runs.first() {
            header.extend(r.domains.iter().map(|d| format!("acc_{}", d.domain)));
        }
        header.extend(["final_grad_cosine".into(), "sharpness".into()]);
        w.write_record(&header).map_err(std::io::Error::from)?;
        for r in runs {
            let mut rec = vec![
                r.method.name().to_string(),
                r.method.strategy_name().to_string(),
                r.seed.to_string(),
                format!("{:.4}", r.target_acc),
            ];
            rec.extend(r.domains.iter().map(|d| format!("{:.4}", d.acc_mean)));
            rec.push(r.final_stability.map_or_else(String::new, |c| format!("{c:.6}")));
            rec.push(format!("{:.6}", r.sharpness));
            w.write_record(&rec).map_err(std::io::Error::from)?;
        }
        w.flush()?;
    }
    Ok(buf)
}
