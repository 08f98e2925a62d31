//! CSV outputs: `metrics.csv`, `eval.csv`, `landscape.csv` and the ablation summary.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::harness::config::TrainConfig;
use crate::harness::eval::DomainAccuracy;
use crate::harness::landscape::Landscape;
use crate::harness::trainer::MetricsRow;

pub const METRICS_COLUMNS: [&str; 12] = [
    "epoch",
    "episode",
    "method",
    "strategy",
    "seed",
    "loss_total",
    "loss_cls",
    "loss_fsl",
    "loss_cdto",
    "loss_con",
    "loss_adv",
    "grad_cosine",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(std::io::Error::from)?;
        fill(&mut w).map_err(std::io::Error::from)?;
        w.flush()?;
    }
    Ok(buf)
}

/// `# key = value` hyperparameter lines, then one row per episode.
pub fn metrics_csv(cfg: &TrainConfig, rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for line in cfg.header_lines() {
        writeln!(out, "{line}")?;
    }
    let body = csv_bytes(&METRICS_COLUMNS, |w| {
        for r in rows {
            let l = &r.losses;
            w.write_record([
                r.epoch.to_string(),
                r.episode.to_string(),
                cfg.method.name().to_string(),
                cfg.method.strategy_name().to_string(),
                cfg.master_seed.to_string(),
                l.total.to_string(),
                l.cls.to_string(),
                l.fsl.to_string(),
                l.cdto.to_string(),
                l.con.to_string(),
                l.adv.to_string(),
                opt(r.grad_cosine),
            ])?;
        }
        Ok(())
    })?;
    out.extend(body);
    Ok(out)
}

pub fn eval_csv(results: &[DomainAccuracy]) -> Result<Vec<u8>> {
    csv_bytes(&["domain", "N", "K", "acc_mean", "acc_ci95"], |w| {
        for r in results {
            w.write_record([
                r.domain.clone(),
                r.n_way.to_string(),
                r.k_shot.to_string(),
                format!("{:.4}", r.acc_mean),
                format!("{:.4}", r.acc_ci95),
            ])?;
        }
        Ok(())
    })
}

pub fn landscape_csv(l: &Landscape) -> Result<Vec<u8>> {
    csv_bytes(&["alpha1", "alpha2", "loss"], |w| {
        for (a1, a2, loss) in &l.points {
            w.write_record([a1.to_string(), a2.to_string(), loss.to_string()])?;
        }
        Ok(())
    })
}

pub fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}
