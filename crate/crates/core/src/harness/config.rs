//! Run configuration and its flat `key = value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::mining::{MiningConfig, Strategy};
use crate::objectives::ObjectiveConfig;
use crate::perturb::PerturbConfig;
use crate::reorient::ReorientConfig;

pub const SEED_ENV: &str = "SRASP_SEED";

/// Which trainer runs an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    /// Perturbation driven by the global style gradient only.
    GlobalOnly,
    Srasp(Strategy),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::GlobalOnly => "global_only",
            Method::Srasp(_) => "srasp",
        }
    }

    pub fn strategy_name(self) -> &'static str {
        match self {
            Method::Srasp(s) => s.name(),
            _ => "none",
        }
    }

    /// `baseline`, `global_only`, or `srasp-<strategy>`.
    pub fn label(self) -> String {
        match self {
            Method::Srasp(s) => format!("srasp-{s}"),
            m => m.name().to_string(),
        }
    }

    /// Accepts [`Method::label`] forms and a bare strategy name.
    pub fn parse_label(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "global_only" => Ok(Method::GlobalOnly),
            _ => s.strip_prefix("srasp-").unwrap_or(s).parse().map(Method::Srasp),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub lr: f64,
    /// Global L2 norm the episode gradient is clipped to before the Adam
    /// step; 0 disables clipping.
    pub grad_clip: f64,
    pub proto_temp: f64,
    pub base_width: usize,
    pub mining: MiningConfig,
    pub reorient: ReorientConfig,
    pub perturb: PerturbConfig,
    pub objective: ObjectiveConfig,
    pub method: Method,
    pub master_seed: u64,
    /// Episodes per target domain evaluated after training; 0 skips evaluation.
    pub eval_episodes: usize,
    pub eval_k_shot: usize,
    /// Text of every key as given in the config file, echoed verbatim.
    raw: BTreeMap<String, String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            episodes_per_epoch: 40,
            n_way: 5,
            k_shot: 1,
            m_query: 15,
            lr: 1e-3,
            grad_clip: 5.0,
            proto_temp: 1.0,
            base_width: 8,
            mining: MiningConfig::default(),
            reorient: ReorientConfig::default(),
            perturb: PerturbConfig::default(),
            objective: ObjectiveConfig::default(),
            method: Method::Srasp(Strategy::Incoherent),
            master_seed: 0,
            eval_episodes: 600,
            eval_k_shot: 1,
            raw: BTreeMap::new(),
        }
    }
}

/// Every recognised key, in header order.
pub const KEYS: &[&str] = &[
    "method",
    "strategy",
    "seed",
    "epochs",
    "episodes_per_epoch",
    "n_way",
    "k_shot",
    "m_query",
    "lr",
    "grad_clip",
    "proto_temp",
    "base_width",
    "xi",
    "norm_eps",
    "lambda",
    "delta",
    "k",
    "m",
    "scale_ranges",
    "flip_prob",
    "kappa_set",
    "epsilon_noise",
    "p_style",
    "eval_episodes",
    "eval_k_shot",
];

/// Parses a float, accepting `a/b` fractions such as `16/255`.
pub fn parse_number(s: &str) -> Result<f64> {
    let bad = || invalid(format!("not a number: {s:?}"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if b == 0.0 {
                return Err(bad());
            }
            a / b
        }
        None => s.parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

fn parse_int<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| invalid(format!("not a non-negative integer: {s:?}")))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|p| parse_number(p.trim())).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => {
                self.method = match value {
                    "baseline" => Method::Baseline,
                    "global_only" => Method::GlobalOnly,
                    "srasp" => Method::Srasp(self.mining.strategy),
                    _ => Method::parse_label(value)?,
                };
                if let Method::Srasp(s) = self.method {
                    self.mining.strategy = s;
                }
            }
            "strategy" => {
                let s: Strategy = value.parse()?;
                self.mining.strategy = s;
                if let Method::Srasp(_) = self.method {
                    self.method = Method::Srasp(s);
                }
            }
            "seed" => self.master_seed = parse_int(value)?,
            "epochs" => self.epochs = parse_int(value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse_int(value)?,
            "n_way" => self.n_way = parse_int(value)?,
            "k_shot" => self.k_shot = parse_int(value)?,
            "m_query" => self.m_query = parse_int(value)?,
            "lr" => self.lr = parse_number(value)?,
            "grad_clip" => self.grad_clip = parse_number(value)?,
            "proto_temp" => self.proto_temp = parse_number(value)?,
            "base_width" => self.base_width = parse_int(value)?,
            "xi" => self.reorient.xi = parse_number(value)?,
            "norm_eps" => self.reorient.norm_eps = parse_number(value)?,
            "lambda" => self.objective.lambda = parse_number(value)?,
            "delta" => self.objective.delta = parse_number(value)?,
            "k" => self.mining.k = parse_int(value)?,
            "m" => self.mining.m = parse_int(value)?,
            "scale_ranges" => {
                self.mining.scale_ranges = value
                    .split(',')
                    .map(|band| {
                        let (lo, hi) = band
                            .trim()
                            .split_once('-')
                            .ok_or_else(|| invalid(format!("scale band {band:?} is not lo-hi")))?;
                        Ok((parse_number(lo.trim())?, parse_number(hi.trim())?))
                    })
                    .collect::<Result<_>>()?
            }
            "flip_prob" => self.mining.flip_prob = parse_number(value)?,
            "kappa_set" => self.perturb.kappa_set = parse_list(value)?,
            "epsilon_noise" => self.perturb.epsilon_noise = parse_number(value)?,
            "p_style" => self.perturb.p_style = parse_number(value)?,
            "eval_episodes" => self.eval_episodes = parse_int(value)?,
            "eval_k_shot" => self.eval_k_shot = parse_int(value)?,
            _ => return Err(invalid(format!("unknown key {key:?}"))),
        }
        self.raw.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let wrap = |e: Error| Error::Config {
                line: i + 1,
                msg: match e {
                    Error::InvalidArgument(m) => m,
                    other => other.to_string(),
                },
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| wrap(invalid(format!("expected `key = value`, got {line:?}"))))?;
            cfg.set(key.trim(), value.trim()).map_err(wrap)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `SRASP_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", v.trim())?;
        }
        Ok(())
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        if let Method::Srasp(s) = method {
            self.mining.strategy = s;
        }
        self.raw.remove("method");
        self.raw.remove("strategy");
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self.raw.remove("seed");
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(invalid("epochs and episodes_per_epoch must be positive"));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.m_query == 0 || self.eval_k_shot == 0 {
            return Err(invalid("need n_way >= 2 and k_shot, m_query, eval_k_shot >= 1"));
        }
        if self.n_way > crate::data::NUM_TARGET_CLASSES {
            return Err(invalid("n_way exceeds the target class count"));
        }
        if !(self.lr > 0.0) || !(self.proto_temp > 0.0) || self.base_width == 0 {
            return Err(invalid("lr, proto_temp and base_width must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(invalid("grad_clip must be >= 0"));
        }
        self.mining.validate()?;
        self.reorient.validate()?;
        self.perturb.validate()?;
        self.objective.validate()?;
        if self.perturb.epsilon_noise <= 0.0 {
            return Err(invalid("epsilon_noise must be positive"));
        }
        Ok(())
    }

    /// Canonical text of `key`, or the text it was given as.
    pub fn value_text(&self, key: &str) -> String {
        if let Some(raw) = self.raw.get(key) {
            return raw.clone();
        }
        match key {
            "method" => self.method.name().into(),
            "strategy" => self.method.strategy_name().into(),
            "seed" => self.master_seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "episodes_per_epoch" => self.episodes_per_epoch.to_string(),
            "n_way" => self.n_way.to_string(),
            "k_shot" => self.k_shot.to_string(),
            "m_query" => self.m_query.to_string(),
            "lr" => self.lr.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "proto_temp" => self.proto_temp.to_string(),
            "base_width" => self.base_width.to_string(),
            "xi" => self.reorient.xi.to_string(),
            "norm_eps" => self.reorient.norm_eps.to_string(),
            "lambda" => self.objective.lambda.to_string(),
            "delta" => self.objective.delta.to_string(),
            "k" => self.mining.k.to_string(),
            "m" => self.mining.m.to_string(),
            "scale_ranges" => self
                .mining
                .scale_ranges
                .iter()
                .map(|(a, b)| format!("{a}-{b}"))
                .collect::<Vec<_>>()
                .join(","),
            "flip_prob" => self.mining.flip_prob.to_string(),
            "kappa_set" => fmt_list(&self.perturb.kappa_set),
            "epsilon_noise" if self.perturb.epsilon_noise == 16.0 / 255.0 => "16/255".into(),
            "epsilon_noise" => self.perturb.epsilon_noise.to_string(),
            "p_style" => self.perturb.p_style.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "eval_k_shot" => self.eval_k_shot.to_string(),
            _ => String::new(),
        }
    }

    /// `# key = value` for every key, the header of `metrics.csv`.
    pub fn header_lines(&self) -> Vec<String> {
        KEYS.iter().map(|k| format!("# {k} = {}", self.value_text(k))).collect()
    }

    /// Renders the config as parseable text.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value_text(k))).collect()
    }
}
