//! Synthetic sequence-classification tasks and Dirichlet label-skew partitions.
//!
//! Each class has a prototype sequence (`seq_len × d_model`); samples are the
//! prototype plus isotropic Gaussian noise. Prototypes are centered over
//! positions by default, so the sequence mean of a raw input carries no class
//! signal and the classifier has to rely on the transformer block.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig};
use crate::numkit::{gaussian_fill, read_matrix, write_matrix, Matrix, RngStream};

pub const DEFAULT_NOISE: f64 = 0.3;
const MAX_PARTITION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub noise: f64,
    /// Subtract each prototype's mean over positions.
    pub centered: bool,
}

impl TaskSpec {
    pub fn for_model(config: &ModelConfig) -> Self {
        TaskSpec {
            num_classes: config.num_classes,
            seq_len: config.seq_len,
            d_model: config.d_model,
            noise: DEFAULT_NOISE,
            centered: true,
        }
    }
}

/// Class prototypes; draw datasets from it with [`SyntheticTask::sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub prototypes: Vec<Matrix>,
}

impl SyntheticTask {
    pub fn new(spec: TaskSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::arg("a task needs at least two classes"));
        }
        if spec.seq_len == 0 || spec.d_model == 0 || !(spec.noise >= 0.0) {
            return Err(Error::arg("task dimensions must be positive and noise nonnegative"));
        }
        let prototypes = (0..spec.num_classes)
            .map(|_| {
                let mut p = gaussian_fill(rng, spec.seq_len, spec.d_model, 1.0);
                if spec.centered && spec.seq_len > 1 {
                    for j in 0..spec.d_model {
                        let mean = p.col(j).iter().sum::<f64>() / spec.seq_len as f64;
                        for i in 0..spec.seq_len {
                            p.row_mut(i)[j] -= mean;
                        }
                    }
                }
                p
            })
            .collect();
        Ok(SyntheticTask { spec, prototypes })
    }

    /// `per_class` samples of every class, interleaved by class.
    pub fn sample(&self, per_class: usize, rng: &mut RngStream) -> Dataset {
        let (s, d) = (self.spec.seq_len, self.spec.d_model);
        let n = per_class * self.spec.num_classes;
        let mut inputs = Matrix::zeros(n * s, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..per_class {
            for (c, proto) in self.prototypes.iter().enumerate() {
                let e = i * self.spec.num_classes + c;
                for t in 0..s {
                    for (x, p) in inputs.row_mut(e * s + t).iter_mut().zip(proto.row(t)) {
                        *x = p + self.spec.noise * rng.normal();
                    }
                }
                labels.push(c);
            }
        }
        Dataset {
            inputs,
            labels,
            seq_len: s,
            num_classes: self.spec.num_classes,
        }
    }
}

/// Stacked examples in the same layout as [`Batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, e: usize) -> Matrix {
        self.inputs.row_block(e * self.seq_len, (e + 1) * self.seq_len)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.inputs.cols();
        let mut inputs = Matrix::zeros(indices.len() * self.seq_len, d);
        for (k, &e) in indices.iter().enumerate() {
            for t in 0..self.seq_len {
                inputs
                    .row_mut(k * self.seq_len + t)
                    .copy_from_slice(self.inputs.row(e * self.seq_len + t));
            }
        }
        Dataset {
            inputs,
            labels: indices.iter().map(|&e| self.labels[e]).collect(),
            seq_len: self.seq_len,
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, indices: &[usize], config: &ModelConfig) -> Result<Batch> {
        let sub = self.subset(indices);
        Batch::new(sub.inputs, sub.labels, config)
    }

    pub fn as_batch(&self, config: &ModelConfig) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone(), config)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// Writes `inputs.fsm` (FSM1) and `labels.txt` (one label per line, preceded
/// by a `# seq_len=S num_classes=C` header).
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("inputs.fsm"))?);
    write_matrix(&mut w, &data.inputs)?;
    w.flush()?;
    let mut l = BufWriter::new(fs::File::create(dir.join("labels.txt"))?);
    writeln!(l, "# seq_len={} num_classes={}", data.seq_len, data.num_classes)?;
    for y in &data.labels {
        writeln!(l, "{y}")?;
    }
    l.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join("labels.txt");
    let bad = |msg: String| Error::Format {
        path: labels_path.clone(),
        msg,
    };
    let text = fs::read_to_string(&labels_path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let field = |key: &str| -> Result<usize> {
        header
            .split_whitespace()
            .find_map(|t| t.strip_prefix(key)?.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("header lacks {key}")))
    };
    let seq_len = field("seq_len")?;
    let num_classes = field("num_classes")?;
    let labels = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .ok()
                .filter(|&y| y < num_classes)
                .ok_or_else(|| bad(format!("line {}: bad label `{l}`", i + 2)))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs = read_matrix(&mut BufReader::new(fs::File::open(dir.join("inputs.fsm"))?))?;
    if seq_len == 0 || inputs.rows() != labels.len() * seq_len {
        return Err(bad(format!(
            "{} labels do not match {} input rows",
            labels.len(),
            inputs.rows()
        )));
    }
    Ok(Dataset {
        inputs,
        labels,
        seq_len,
        num_classes,
    })
}

/// Per-device sample indices; disjoint and covering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub devices: Vec<Vec<usize>>,
}

/// Splits `labels` over `num_devices` devices with per-class device
/// proportions drawn from `Dir(alpha)`.
///
/// Each class's indices are shuffled and cut into consecutive runs whose
/// sizes follow the proportions, rounded by largest remainder. Proportions
/// are redrawn (up to 100 times) until every device holds a sample.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    num_devices: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Partition> {
    if num_devices == 0 {
        return Err(Error::arg("need at least one device"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::arg(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if labels.len() < num_devices {
        return Err(Error::config(format!(
            "{} samples cannot cover {num_devices} devices",
            labels.len()
        )));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::arg(format!("label {y} outside [0, {num_classes})")))?
            .push(i);
    }
    if num_devices == 1 {
        return Ok(Partition {
            devices: vec![(0..labels.len()).collect()],
        });
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::arg(e.to_string()))?;
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut devices = vec![Vec::new(); num_devices];
        let mut degenerate = false;
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let draws: Vec<f64> = (0..num_devices).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                degenerate = true;
                break;
            }
            let counts = largest_remainder(members.len(), &draws.iter().map(|g| g / total).collect::<Vec<_>>());
            let mut start = 0;
            for (dev, n) in counts.into_iter().enumerate() {
                devices[dev].extend_from_slice(&members[start..start + n]);
                start += n;
            }
        }
        if !degenerate && devices.iter().all(|d| !d.is_empty()) {
            for d in &mut devices {
                d.sort_unstable();
            }
            return Ok(Partition { devices });
        }
    }
    Err(Error::config(format!(
        "no Dirichlet draw gave every one of {num_devices} devices a sample in {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

/// Integer counts summing to `n`, proportional to `shares` (which sum to 1).
/// Leftover units go to the largest fractional parts, lowest index first on ties.
pub fn largest_remainder(n: usize, shares: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}
