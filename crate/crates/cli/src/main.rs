use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use srasp_core::backbone::ModelParams;
use srasp_core::data::{export_dataset, DomainSpec};
use srasp_core::harness::ablate::{ablate, ablation_csv, seed_mean, ProbeConfig};
use srasp_core::harness::checks::{gradcheck_suite, TOLERANCE};
use srasp_core::harness::landscape::{landscape_episodes, probe_landscape};
use srasp_core::harness::metrics::{self, eval_csv, landscape_csv, metrics_csv};
use srasp_core::harness::trainer::baseline_loss;
use srasp_core::harness::{evaluate, train, Method, TrainConfig};

#[derive(Parser)]
#[command(name = "srasp", version, about = "Adversarial style perturbation lab for cross-domain few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite-difference gradient suite; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Meta-train one model and write metrics.csv, model.srsp and eval.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a list of domains.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated domain names or ids; `targets` for all target domains.
        #[arg(long, default_value = "targets")]
        domains: String,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        n_way: usize,
        #[arg(long, default_value_t = 1)]
        k_shot: usize,
        #[arg(long, default_value_t = 15)]
        m_query: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write eval.csv here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare several methods over several seeds.
    Ablate {
        /// Comma-separated: incoherent, concept, random, baseline, global_only.
        #[arg(long, default_value = "incoherent,random,concept,baseline")]
        strategies: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Loss along filter-normalised random directions around a checkpoint.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        dims: usize,
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
        #[arg(long, default_value_t = 21)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "landscape.csv")]
        out: PathBuf,
    },
    /// Write rendered images as SRSP tensor files plus manifest.csv.
    ExportData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Comma-separated domain names or ids; `all` for every domain.
        #[arg(long, default_value = "all")]
        domains: String,
    },
}

fn parse_domains(list: &str) -> Result<Vec<DomainSpec>> {
    match list {
        "all" => Ok(DomainSpec::all()),
        "targets" => Ok(DomainSpec::targets()),
        _ => list
            .split(',')
            .map(|d| DomainSpec::lookup(d.trim()).map_err(Into::into))
            .collect(),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { trials, seed } => {
            let results = gradcheck_suite(trials, seed)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{:<6} {:<22} trials={:<4} max_rel_error={:.3e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.trials,
                    r.max_error
                );
                ok &= r.passed();
            }
            println!("{} checks, tolerance {TOLERANCE:e}: {}", results.len(), if ok { "all passed" } else { "FAILED" });
            Ok(ok)
        }
        Command::Train { config, out } => {
            let cfg = load_config(config.as_ref())?;
            std::fs::create_dir_all(&out)?;
            eprintln!("training {} seed {} ({} x {} episodes)", cfg.method, cfg.master_seed, cfg.epochs, cfg.episodes_per_epoch);
            let outcome = train(&cfg)?;
            metrics::write(out.join("metrics.csv"), &metrics_csv(&cfg, &outcome.rows)?)?;
            outcome.params.save(out.join("model.srsp"))?;
            for (e, (loss, cos)) in outcome.epoch_loss.iter().zip(&outcome.epoch_stability).enumerate() {
                eprintln!("epoch {e:>3} loss {loss:.4} grad_cosine {}", cos.map_or("-".into(), |c| format!("{c:.4}")));
            }
            eprintln!("trained in {:.1?}", outcome.wall_clock);
            if cfg.eval_episodes > 0 {
                let res = evaluate(
                    &outcome.params,
                    &DomainSpec::targets(),
                    cfg.eval_episodes,
                    cfg.n_way,
                    cfg.eval_k_shot,
                    cfg.m_query,
                    cfg.master_seed,
                )?;
                let csv = eval_csv(&res)?;
                metrics::write(out.join("eval.csv"), &csv)?;
                print!("{}", String::from_utf8_lossy(&csv));
            }
            Ok(true)
        }
        Command::Eval { checkpoint, domains, episodes, n_way, k_shot, m_query, seed, out } => {
            let params = ModelParams::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let res = evaluate(&params, &parse_domains(&domains)?, episodes, n_way, k_shot, m_query, seed)?;
            let csv = eval_csv(&res)?;
            match out {
                Some(p) => metrics::write(p, &csv)?,
                None => print!("{}", String::from_utf8_lossy(&csv)),
            }
            Ok(true)
        }
        Command::Ablate { strategies, seeds, config, out } => {
            let cfg = load_config(config.as_ref())?;
            let methods = strategies
                .split(',')
                .map(|s| Method::parse_label(s.trim()).map_err(Into::into))
                .collect::<Result<Vec<_>>>()?;
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.master_seed + i).collect();
            std::fs::create_dir_all(&out)?;
            let runs = ablate(&cfg, &methods, &seed_list, &ProbeConfig::default(), |r| {
                eprintln!(
                    "{:<18} seed {:<3} target acc {:6.2}  final grad cosine {}  sharpness {:.4}  ({:.0?})",
                    r.method.label(),
                    r.seed,
                    r.target_acc,
                    r.final_stability.map_or("-".into(), |c| format!("{c:.4}")),
                    r.sharpness,
                    r.wall_clock
                );
            })?;
            metrics::write(out.join("ablation.csv"), &ablation_csv(&runs)?)?;
            println!("method,mean_target_acc,mean_final_grad_cosine,mean_sharpness");
            for m in methods {
                let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
                println!(
                    "{},{},{},{}",
                    m.label(),
                    f(seed_mean(&runs, m, |r| Some(r.target_acc))),
                    f(seed_mean(&runs, m, |r| r.final_stability)),
                    f(seed_mean(&runs, m, |r| Some(r.sharpness)))
                );
            }
            Ok(true)
        }
        Command::Landscape { checkpoint, dims, radius, steps, episodes, seed, out } => {
            let params = ModelParams::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let eps = landscape_episodes(seed, episodes, 5, 1, 15)?;
            let loss = |p: &ModelParams| -> srasp_core::Result<f64> {
                let mut s = 0.0;
                for e in &eps {
                    s += baseline_loss(p, e)?;
                }
                Ok(s / eps.len() as f64)
            };
            let l = probe_landscape(&params, loss, dims, radius, steps, seed)?;
            metrics::write(&out, &landscape_csv(&l)?)?;
            println!("center {:.6} sharpness {:.6} ({} points written to {})", l.center, l.sharpness(), l.points.len(), out.display());
            Ok(true)
        }
        Command::ExportData { out, per_class, domains } => {
            let n = export_dataset(&out, &parse_domains(&domains)?, per_class)?;
            println!("wrote {n} images and manifest.csv to {}", out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
