//! Paired multi-seed comparison of experiment configurations.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fedsim::{run_experiment, MetricsSink, RunSummary};

/// One run of one policy at one seed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    /// `None` when the run failed or a loss went non-finite.
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

impl RunOutcome {
    fn usable(&self) -> Option<&RunSummary> {
        self.summary.as_ref().filter(|s| !s.diverged())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Stat { mean: f64::NAN, sd: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, sd, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRow {
    pub label: String,
    pub final_acc: Stat,
    pub gamma: Stat,
    /// Simulated time to reach the target accuracy, over runs that reached it.
    pub time_to_target: Stat,
    /// Paired final-accuracy difference against the first policy.
    pub acc_delta: Stat,
    /// Paired ratio of the first policy's time to target over this one's.
    pub speedup: Stat,
    /// Runs that failed or produced non-finite losses.
    pub flagged: usize,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub target_acc: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<PolicyRow>,
    pub runs: Vec<RunOutcome>,
}

/// Runs every `(label, config)` at every seed and summarizes per policy.
///
/// With `out` set, each run streams its metrics into `out/<label>/seed-<s>/`.
pub fn compare(
    configs: &[(String, ExperimentConfig)],
    seeds: &[u64],
    target_acc: f64,
    out: Option<&Path>,
) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(Error::arg("compare needs at least two configurations"));
    }
    if seeds.is_empty() {
        return Err(Error::arg("compare needs at least one seed"));
    }
    let mut runs = Vec::with_capacity(configs.len() * seeds.len());
    for (label, base) in configs {
        for &seed in seeds {
            let config = ExperimentConfig { seed, ..base.clone() };
            let mut sink = match out {
                Some(dir) => MetricsSink::create(&dir.join(label).join(format!("seed-{seed}")), false)?,
                None => MetricsSink::none(),
            };
            let (summary, error) = match run_experiment(&config, &mut sink) {
                Ok(s) if s.diverged() => (Some(s), Some("non-finite loss".to_string())),
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e.to_string())),
            };
            runs.push(RunOutcome {
                label: label.clone(),
                seed,
                summary,
                error,
            });
        }
    }
    let rows = summarize(configs, seeds, &runs, target_acc);
    Ok(Comparison {
        target_acc,
        seeds: seeds.to_vec(),
        rows,
        runs,
    })
}

fn summarize(configs: &[(String, ExperimentConfig)], seeds: &[u64], runs: &[RunOutcome], target_acc: f64) -> Vec<PolicyRow> {
    let find = |label: &str, seed: u64| runs.iter().find(|r| r.label == label && r.seed == seed);
    let baseline = &configs[0].0;
    configs
        .iter()
        .map(|(label, _)| {
            let mine: Vec<&RunOutcome> = seeds.iter().filter_map(|&s| find(label, s)).collect();
            let ok: Vec<&RunSummary> = mine.iter().filter_map(|r| r.usable()).collect();
            let mut acc_delta = Vec::new();
            let mut speedup = Vec::new();
            for &s in seeds {
                let (Some(a), Some(b)) = (
                    find(label, s).and_then(RunOutcome::usable),
                    find(baseline, s).and_then(RunOutcome::usable),
                ) else {
                    continue;
                };
                acc_delta.push(a.final_acc() - b.final_acc());
                if let (Some(ta), Some(tb)) = (a.time_to_accuracy(target_acc), b.time_to_accuracy(target_acc)) {
                    if ta > 0.0 {
                        speedup.push(tb / ta);
                    }
                }
            }
            PolicyRow {
                label: label.clone(),
                final_acc: Stat::of(&ok.iter().map(|s| s.final_acc()).collect::<Vec<_>>()),
                gamma: Stat::of(&ok.iter().map(|s| s.mean_gamma()).collect::<Vec<_>>()),
                time_to_target: Stat::of(&ok.iter().filter_map(|s| s.time_to_accuracy(target_acc)).collect::<Vec<_>>()),
                acc_delta: Stat::of(&acc_delta),
                speedup: Stat::of(&speedup),
                flagged: mine.len() - ok.len(),
            }
        })
        .collect()
}

impl Comparison {
    /// Plain-text table, one row per policy; deltas are against the first row.
    pub fn render(&self) -> String {
        let fmt = |s: &Stat| {
            if s.n == 0 {
                "-".to_string()
            } else {
                format!("{:.4}±{:.4}", s.mean, s.sd)
            }
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>17} {:>17} {:>17} {:>17} {:>17} {:>7}",
            "policy",
            "final_acc",
            "gamma",
            format!("t@{:.2}", self.target_acc),
            "d_acc",
            "speedup",
            "flagged"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20} {:>17} {:>17} {:>17} {:>17} {:>17} {:>7}",
                r.label,
                fmt(&r.final_acc),
                fmt(&r.gamma),
                fmt(&r.time_to_target),
                fmt(&r.acc_delta),
                fmt(&r.speedup),
                if r.flagged > 0 { format!("{}!", r.flagged) } else { "0".into() }
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }
}
