//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; absent
//! keys take their defaults, unknown or repeated keys are rejected.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Federated policy to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Per-device bandit-chosen ratio and rank, iterative pruning, importance-weighted products.
    Fedspine,
    /// Uniform rank, linearly ramped ratio, factor averaging.
    FedaptUniform,
    /// Prune to the target in the first round, then tune.
    PruneThenTune,
    /// Tune every round, prune to the target after the last one.
    TuneThenPrune,
    /// No pruning; fixed heterogeneous ranks assigned round-robin.
    NoPruneHetlora,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Fedspine,
        Mode::FedaptUniform,
        Mode::PruneThenTune,
        Mode::TuneThenPrune,
        Mode::NoPruneHetlora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fedspine => "fedspine",
            Mode::FedaptUniform => "fedapt_uniform",
            Mode::PruneThenTune => "prune_then_tune",
            Mode::TuneThenPrune => "tune_then_prune",
            Mode::NoPruneHetlora => "no_prune_hetlora",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::arg(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub devices: usize,
    /// Devices sampled per round; 0 means all.
    pub sampled_m: usize,
    pub tau: usize,
    pub eta: f64,
    pub lambda: f64,
    pub delta: f64,
    pub p_target: f64,
    pub r_min: usize,
    pub r_max: usize,
    pub seed: u64,
    pub mode: Mode,
    pub dirichlet_alpha: f64,
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lora_alpha: f64,
    /// Rank used by the uniform and sequential policies.
    pub uniform_rank: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    /// Seconds per multiply-accumulate of the fastest device.
    pub compute_base: f64,
    /// Ratio between the slowest and fastest compute factor.
    pub compute_span: f64,
    pub bandwidth_min: f64,
    pub bandwidth_max: f64,
    /// Rounds between device mode changes.
    pub mode_period: usize,
    /// Worker threads; 0 means available parallelism.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rounds: 100,
            devices: 10,
            sampled_m: 0,
            tau: 20,
            eta: 0.9,
            lambda: 0.99,
            delta: 0.05,
            p_target: 0.3,
            r_min: 2,
            r_max: 32,
            seed: 0,
            mode: Mode::Fedspine,
            dirichlet_alpha: 0.5,
            model: ModelConfig::default(),
            lr: 5e-4,
            batch_size: 32,
            optimizer: Optimizer::Adam,
            lora_alpha: 16.0,
            uniform_rank: 8,
            samples_per_class: 250,
            test_per_class: 50,
            noise: 0.3,
            compute_base: 5e-10,
            compute_span: 10.0,
            bandwidth_min: 125e3,
            bandwidth_max: 3.75e6,
            mode_period: 20,
            workers: 0,
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "rounds",
    "devices",
    "sampled_m",
    "tau",
    "eta",
    "lambda",
    "delta",
    "p_target",
    "r_min",
    "r_max",
    "seed",
    "mode",
    "dirichlet_alpha",
    "d_model",
    "num_heads",
    "head_dim",
    "ffn_channels",
    "num_blocks",
    "seq_len",
    "num_classes",
    "lr",
    "batch_size",
    "optimizer",
    "lora_alpha",
    "uniform_rank",
    "samples_per_class",
    "test_per_class",
    "noise",
    "compute_base",
    "compute_span",
    "bandwidth_min",
    "bandwidth_max",
    "mode_period",
    "workers",
];

fn invalid(key: &str, msg: impl Into<String>) -> Error {
    Error::Validation {
        key: key.into(),
        msg: msg.into(),
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(key, format!("cannot parse `{value}`")))
}

impl ExperimentConfig {
    /// Assigns one key; the value is range-checked later by [`validate`](Self::validate).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "rounds" => self.rounds = parse_value(key, value)?,
            "devices" => self.devices = parse_value(key, value)?,
            "sampled_m" => self.sampled_m = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "delta" => self.delta = parse_value(key, value)?,
            "p_target" => self.p_target = parse_value(key, value)?,
            "r_min" => self.r_min = parse_value(key, value)?,
            "r_max" => self.r_max = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mode" => self.mode = value.parse().map_err(|e: Error| invalid(key, e.to_string()))?,
            "dirichlet_alpha" => self.dirichlet_alpha = parse_value(key, value)?,
            "d_model" => m.d_model = parse_value(key, value)?,
            "num_heads" => m.num_heads = parse_value(key, value)?,
            "head_dim" => m.head_dim = parse_value(key, value)?,
            "ffn_channels" => m.ffn_channels = parse_value(key, value)?,
            "num_blocks" => m.num_blocks = parse_value(key, value)?,
            "seq_len" => m.seq_len = parse_value(key, value)?,
            "num_classes" => m.num_classes = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "optimizer" => {
                self.optimizer = value.parse().map_err(|e: Error| invalid(key, e.to_string()))?
            }
            "lora_alpha" => self.lora_alpha = parse_value(key, value)?,
            "uniform_rank" => self.uniform_rank = parse_value(key, value)?,
            "samples_per_class" => self.samples_per_class = parse_value(key, value)?,
            "test_per_class" => self.test_per_class = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "compute_base" => self.compute_base = parse_value(key, value)?,
            "compute_span" => self.compute_span = parse_value(key, value)?,
            "bandwidth_min" => self.bandwidth_min = parse_value(key, value)?,
            "bandwidth_max" => self.bandwidth_max = parse_value(key, value)?,
            "mode_period" => self.mode_period = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "rounds" => self.rounds.to_string(),
            "devices" => self.devices.to_string(),
            "sampled_m" => self.sampled_m.to_string(),
            "tau" => self.tau.to_string(),
            "eta" => self.eta.to_string(),
            "lambda" => self.lambda.to_string(),
            "delta" => self.delta.to_string(),
            "p_target" => self.p_target.to_string(),
            "r_min" => self.r_min.to_string(),
            "r_max" => self.r_max.to_string(),
            "seed" => self.seed.to_string(),
            "mode" => self.mode.to_string(),
            "dirichlet_alpha" => self.dirichlet_alpha.to_string(),
            "d_model" => m.d_model.to_string(),
            "num_heads" => m.num_heads.to_string(),
            "head_dim" => m.head_dim.to_string(),
            "ffn_channels" => m.ffn_channels.to_string(),
            "num_blocks" => m.num_blocks.to_string(),
            "seq_len" => m.seq_len.to_string(),
            "num_classes" => m.num_classes.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "lora_alpha" => self.lora_alpha.to_string(),
            "uniform_rank" => self.uniform_rank.to_string(),
            "samples_per_class" => self.samples_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "noise" => self.noise.to_string(),
            "compute_base" => self.compute_base.to_string(),
            "compute_span" => self.compute_span.to_string(),
            "bandwidth_min" => self.bandwidth_min.to_string(),
            "bandwidth_max" => self.bandwidth_max.to_string(),
            "mode_period" => self.mode_period.to_string(),
            "workers" => self.workers.to_string(),
            _ => return None,
        })
    }

    /// Devices taking part in each round.
    pub fn participants(&self) -> usize {
        if self.sampled_m == 0 {
            self.devices
        } else {
            self.sampled_m
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("devices", self.devices),
            ("tau", self.tau),
            ("r_min", self.r_min),
            ("batch_size", self.batch_size),
            ("uniform_rank", self.uniform_rank),
            ("samples_per_class", self.samples_per_class),
            ("test_per_class", self.test_per_class),
            ("mode_period", self.mode_period),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        self.model.validate().map_err(|e| invalid("d_model", e.to_string()))?;
        if self.sampled_m > self.devices {
            return Err(invalid("sampled_m", format!("exceeds devices = {}", self.devices)));
        }
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(key, format!("{v} outside [0, 1]")))
            }
        };
        unit("eta", self.eta)?;
        unit("p_target", self.p_target)?;
        if self.p_target >= 1.0 {
            return Err(invalid("p_target", "must be below 1"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(invalid("lambda", format!("{} outside (0, 1]", self.lambda)));
        }
        let pos = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, format!("{v} must be positive")))
            }
        };
        pos("delta", self.delta)?;
        pos("dirichlet_alpha", self.dirichlet_alpha)?;
        pos("lora_alpha", self.lora_alpha)?;
        pos("compute_base", self.compute_base)?;
        pos("bandwidth_min", self.bandwidth_min)?;
        pos("bandwidth_max", self.bandwidth_max)?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be finite and nonnegative"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("noise", "must be finite and nonnegative"));
        }
        if !(self.compute_span >= 1.0 && self.compute_span.is_finite()) {
            return Err(invalid("compute_span", "must be at least 1"));
        }
        if self.bandwidth_max < self.bandwidth_min {
            return Err(invalid("bandwidth_max", "below bandwidth_min"));
        }
        let max_rank = self.model.d_model.min(self.model.ffn_channels);
        if self.r_max < self.r_min {
            return Err(invalid("r_max", "below r_min"));
        }
        if self.r_max > max_rank {
            return Err(invalid("r_max", format!("exceeds the smallest host dimension {max_rank}")));
        }
        if self.uniform_rank > max_rank {
            return Err(invalid("uniform_rank", format!("exceeds the smallest host dimension {max_rank}")));
        }
        if self.samples_per_class * self.model.num_classes < self.devices {
            return Err(invalid("samples_per_class", "too few samples to give every device one"));
        }
        Ok(())
    }

    /// The effective configuration in the same `key = value` format, one key per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }
}

/// Parses and validates configuration text; `origin` names the source in errors.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.into(),
            line: i + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(parse_err(format!("expected `key = value`, got `{line}`")));
        }
        if !KEYS.contains(&key) {
            return Err(parse_err(format!("unknown key `{key}`")));
        }
        if seen.iter().any(|k| k == key) {
            return Err(parse_err(format!("duplicate key `{key}`")));
        }
        seen.push(key.to_string());
        config.set(key, value)?;
    }
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    parse_config_str(&text, &path.display().to_string())
}
