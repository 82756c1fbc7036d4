//! LoRA-guided structured pruning: per-entry scores, group sums, moving
//! averages and mask selection.
//!
//! A frozen weight has no gradient of its own, so its first-order sensitivity
//! is estimated from the LoRA gradients: the change of `B·A` after one step
//! along `(∂F/∂B, ∂F/∂A)` is `∂B·A + B·∂A − ∂B·∂A`, and the entry score is
//! the square of that estimate times the current weight value.

use crate::error::{Error, Result};
use crate::lora::LoraModule;
use crate::model::{GroupId, HostId, LayerKind, MaskSet, ModelConfig};
use crate::numkit::{dot, Matrix};

pub const DEFAULT_ETA: f64 = 0.9;

/// Score of a single entry `(m, n)` of a host weight.
///
/// `grad_b_row`/`b_row` are row `m` of `∂F/∂B` and `B`; `a_col`/`grad_a_col`
/// are column `n` of `A` and `∂F/∂A`. `weight` is `W[m,n] + ΔW[m,n]`.
pub fn lora_guided_importance(
    weight: f64,
    grad_b_row: &[f64],
    b_row: &[f64],
    a_col: &[f64],
    grad_a_col: &[f64],
) -> f64 {
    let sensitivity = dot(grad_b_row, a_col) + dot(b_row, grad_a_col) - dot(grad_b_row, grad_a_col);
    (sensitivity * weight).powi(2)
}

/// [`lora_guided_importance`] for every entry of one host weight at once.
///
/// The weight factor is `w0 + (alpha/r)·B·A`, the update the forward pass
/// actually applies.
pub fn lora_guided_scores(
    w0: &Matrix,
    lora: &LoraModule,
    grad_b: &Matrix,
    grad_a: &Matrix,
) -> Result<Matrix> {
    let mut sens = grad_b.matmul(lora.a())?;
    sens.axpy(1.0, &lora.b().matmul(grad_a)?)?;
    sens.axpy(-1.0, &grad_b.matmul(grad_a)?)?;
    let mut weight = w0.clone();
    weight.axpy(lora.scale(), &lora.product())?;
    Ok(sens.hadamard(&weight)?.map(|x| x * x))
}

/// A contiguous run of rows or columns of one host weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub host: HostId,
    pub by_column: bool,
    pub start: usize,
    pub end: usize,
}

/// Which weight slices belong to each prunable group.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMap {
    /// `groups[layer][group]`
    pub groups: Vec<Vec<Vec<Slice>>>,
}

impl DependencyMap {
    /// Heads own query/key/value columns and out rows; channels own one
    /// ffn1 column and one ffn2 row.
    pub fn for_model(config: &ModelConfig) -> Self {
        let groups = (0..config.num_blocks)
            .map(|l| {
                let heads = (0..config.num_heads).map(|h| {
                    let (start, end) = (h * config.head_dim, (h + 1) * config.head_dim);
                    [LayerKind::Query, LayerKind::Key, LayerKind::Value, LayerKind::Out]
                        .map(|kind| Slice {
                            host: HostId::new(l, kind),
                            by_column: kind.groups_by_column(),
                            start,
                            end,
                        })
                        .to_vec()
                });
                let channels = (0..config.ffn_channels).map(|c| {
                    [LayerKind::Ffn1, LayerKind::Ffn2]
                        .map(|kind| Slice {
                            host: HostId::new(l, kind),
                            by_column: kind.groups_by_column(),
                            start: c,
                            end: c + 1,
                        })
                        .to_vec()
                });
                heads.chain(channels).collect()
            })
            .collect();
        DependencyMap { groups }
    }

    /// Every entry of every host weight must fall in exactly one group.
    pub fn check_partition(&self, config: &ModelConfig) -> Result<()> {
        let mut hits: Vec<Vec<u32>> = config
            .hosts()
            .iter()
            .map(|h| {
                let (d, k) = config.host_shape(h.kind);
                vec![0; d * k]
            })
            .collect();
        for slice in self.groups.iter().flatten().flatten() {
            let (d, k) = config.host_shape(slice.host.kind);
            let span = if slice.by_column { k } else { d };
            if slice.host.block >= config.num_blocks || slice.end > span || slice.start >= slice.end {
                return Err(Error::Partition(format!(
                    "slice {}..{} of {} is out of range",
                    slice.start, slice.end, slice.host
                )));
            }
            let counts = &mut hits[slice.host.slot()];
            for i in 0..d {
                for j in 0..k {
                    let idx = if slice.by_column { j } else { i };
                    if (slice.start..slice.end).contains(&idx) {
                        counts[i * k + j] += 1;
                    }
                }
            }
        }
        for (host, counts) in config.hosts().iter().zip(&hits) {
            if let Some(pos) = counts.iter().position(|&c| c != 1) {
                let k = config.host_shape(host.kind).1;
                let what = if counts[pos] == 0 { "not covered by any group" } else { "claimed by several groups" };
                return Err(Error::Partition(format!(
                    "{host} entry ({}, {}) {what}",
                    pos / k,
                    pos % k
                )));
            }
        }
        Ok(())
    }
}

/// Sums per-entry scores (one matrix per host, host order) within each group.
pub fn group_importance(
    config: &ModelConfig,
    map: &DependencyMap,
    scores: &[Matrix],
) -> Result<Vec<Vec<f64>>> {
    let hosts = config.hosts();
    if scores.len() != hosts.len() {
        return Err(Error::Partition(format!(
            "expected {} score matrices, got {}",
            hosts.len(),
            scores.len()
        )));
    }
    for (h, s) in hosts.iter().zip(scores) {
        if s.shape() != config.host_shape(h.kind) {
            return Err(Error::Partition(format!("scores for {h} have shape {:?}", s.shape())));
        }
    }
    map.check_partition(config)?;
    Ok(map
        .groups
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|slices| {
                    slices
                        .iter()
                        .map(|sl| {
                            let m = &scores[sl.host.slot()];
                            if sl.by_column {
                                (0..m.rows())
                                    .map(|i| m.row(i)[sl.start..sl.end].iter().sum::<f64>())
                                    .sum::<f64>()
                            } else {
                                (sl.start..sl.end).map(|i| m.row(i).iter().sum::<f64>()).sum()
                            }
                        })
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// `theta ← eta·theta + (1 − eta)·new`, elementwise.
pub fn update_moving_average(theta: &mut [Vec<f64>], new: &[Vec<f64>], eta: f64) -> Result<()> {
    check_eta(eta)?;
    if theta.len() != new.len() || theta.iter().zip(new).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::arg("moving average shapes differ"));
    }
    for (t, n) in theta.iter_mut().flatten().zip(new.iter().flatten()) {
        *t = eta * *t + (1.0 - eta) * n;
    }
    Ok(())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::arg(format!("eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

/// Moving-average group scores of one device. Persists across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupImportanceState {
    /// `theta[layer][group]`
    pub theta: Vec<Vec<f64>>,
    pub eta: f64,
    /// Number of scored batches so far.
    pub steps: u64,
}

impl GroupImportanceState {
    pub fn new(config: &ModelConfig, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(GroupImportanceState {
            theta: vec![vec![0.0; config.groups_per_block()]; config.num_blocks],
            eta,
            steps: 0,
        })
    }

    /// Folds in one batch of group scores. Pruned groups keep their last value.
    pub fn update(&mut self, new: &[Vec<f64>], masks: &MaskSet) -> Result<()> {
        if self.theta.len() != new.len() || self.theta.iter().zip(new).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::arg("group score shape mismatch"));
        }
        let eta = self.eta;
        for (l, (row, fresh)) in self.theta.iter_mut().zip(new).enumerate() {
            for (g, (v, &n)) in row.iter_mut().zip(fresh).enumerate() {
                if masks.is_kept(GroupId::new(l, g)) {
                    *v = eta * *v + (1.0 - eta) * n;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn score(&self, g: GroupId) -> f64 {
        self.theta[g.layer][g.group]
    }
}

/// Groups to clear so that the pruned ratio reaches `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision {
    pub target: f64,
    pub clear: Vec<GroupId>,
}

/// Prunable parameters that must be removed for `target` to hold.
pub fn required_pruned(config: &ModelConfig, target: f64) -> usize {
    let total = config.prunable_params() as f64;
    (target * total - 1e-9).ceil().max(0.0) as usize
}

/// Chooses the unpruned groups to clear so the pruned parameter count reaches
/// `target` with the smallest possible overshoot.
///
/// Heads and channels form two size classes; within a class the lowest-scored
/// groups go first (ties by layer, then group index). Among the per-class
/// counts that achieve the minimal overshoot, the cheapest total score wins.
pub fn select_and_mask(
    config: &ModelConfig,
    state: &GroupImportanceState,
    masks: &MaskSet,
    target: f64,
) -> Result<PruneDecision> {
    if !target.is_finite() || target < 0.0 {
        return Err(Error::arg(format!("pruning target must be in [0, 1], got {target}")));
    }
    if target > 1.0 {
        return Err(Error::Feasibility { target, max: 1.0 });
    }
    let total = config.prunable_params();
    let already = total - masks.retained_params(config);
    let need = required_pruned(config, target);
    if already >= need {
        return Ok(PruneDecision { target, clear: Vec::new() });
    }
    let missing = need - already;

    let ranked = |is_head: bool| {
        let mut v: Vec<(GroupId, f64)> = masks
            .iter_groups()
            .filter(|&(g, kept)| kept && (g.group < config.num_heads) == is_head)
            .map(|(g, _)| (g, state.score(g)))
            .collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    };
    let heads = ranked(true);
    let channels = ranked(false);
    let prefix = |v: &[(GroupId, f64)]| {
        let mut acc = vec![0.0];
        for (_, s) in v {
            acc.push(acc.last().unwrap() + s);
        }
        acc
    };
    let (head_cost, chan_cost) = (prefix(&heads), prefix(&channels));
    let (sh, sc) = (config.head_group_params(), config.channel_group_params());

    let mut best: Option<(usize, f64, usize, usize)> = None;
    for nh in 0..=heads.len() {
        let rest = missing.saturating_sub(nh * sh);
        let nc = rest.div_ceil(sc);
        if nc > channels.len() {
            continue;
        }
        let removed = nh * sh + nc * sc;
        let cost = head_cost[nh] + chan_cost[nc];
        let better = match best {
            None => true,
            Some((r, c, _, _)) => removed < r || (removed == r && cost < c),
        };
        if better {
            best = Some((removed, cost, nh, nc));
        }
        if rest == 0 {
            break;
        }
    }
    let (_, _, nh, nc) = best.ok_or(Error::Feasibility { target, max: 1.0 })?;
    let mut clear: Vec<GroupId> = heads[..nh]
        .iter()
        .chain(&channels[..nc])
        .map(|&(g, _)| g)
        .collect();
    clear.sort();
    Ok(PruneDecision { target, clear })
}
