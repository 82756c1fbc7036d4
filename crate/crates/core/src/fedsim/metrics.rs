//! Per-round records and their on-disk streams.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bandit::PullRecord;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device: usize,
    /// Assigned pruning ratio.
    pub p: f64,
    pub r: usize,
    pub t_comp: f64,
    pub t_comm: f64,
    pub t_total: f64,
    pub delta_f: f64,
    /// Ratio actually pruned after the round.
    pub pruned_ratio: f64,
    pub importance: f64,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: String,
    pub devices: Vec<DeviceRecord>,
    pub gamma: f64,
    /// Slowest device's time; the round's wall-clock length.
    pub round_time: f64,
    pub global_acc: f64,
    pub global_loss: f64,
    pub mean_p: f64,
    pub mean_r: f64,
    /// Devices whose pruned ratio fell short of the assigned ratio.
    pub violations: usize,
}

impl RoundRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round, self.gamma, self.global_acc, self.global_loss, self.mean_p, self.mean_r
        )
    }
}

pub const SUMMARY_HEADER: &str = "round,gamma,global_acc,global_loss,mean_p,mean_r";
pub const IMPORTANCE_HEADER: &str = "round,device,layer,group,score,masked";

/// One row of the importance dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceRow {
    pub round: usize,
    pub device: usize,
    pub layer: usize,
    pub group: usize,
    pub score: f64,
    pub masked: bool,
}

/// Append-only output files, flushed after every round.
#[derive(Default)]
pub struct MetricsSink {
    rounds: Option<BufWriter<File>>,
    summary: Option<BufWriter<File>>,
    pulls: Option<BufWriter<File>>,
    importance: Option<BufWriter<File>>,
}

impl MetricsSink {
    /// Discards everything.
    pub fn none() -> Self {
        MetricsSink::default()
    }

    /// `metrics.jsonl`, `summary.csv` and `pulls.jsonl` under `dir`, plus
    /// `importance.csv` when `importance` is set.
    pub fn create(dir: &Path, importance: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        let mut summary = open("summary.csv")?;
        writeln!(summary, "{SUMMARY_HEADER}")?;
        let importance = if importance {
            let mut w = open("importance.csv")?;
            writeln!(w, "{IMPORTANCE_HEADER}")?;
            Some(w)
        } else {
            None
        };
        Ok(MetricsSink {
            rounds: Some(open("metrics.jsonl")?),
            summary: Some(summary),
            pulls: Some(open("pulls.jsonl")?),
            importance,
        })
    }

    pub fn wants_importance(&self) -> bool {
        self.importance.is_some()
    }

    pub fn write_round(&mut self, record: &RoundRecord, pulls: &[PullRecord], importance: &[ImportanceRow]) -> Result<()> {
        if let Some(w) = &mut self.rounds {
            writeln!(w, "{}", record.to_json_line()?)?;
            w.flush()?;
        }
        if let Some(w) = &mut self.summary {
            writeln!(w, "{}", record.csv_row())?;
            w.flush()?;
        }
        if let Some(w) = &mut self.pulls {
            for p in pulls {
                writeln!(w, "{}", serde_json::to_string(p)?)?;
            }
            w.flush()?;
        }
        if let Some(w) = &mut self.importance {
            for row in importance {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    row.round, row.device, row.layer, row.group, row.score, row.masked as u8
                )?;
            }
            w.flush()?;
        }
        Ok(())
    }
}
