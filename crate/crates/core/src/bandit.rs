//! Discounted UCB over an adaptively partitioned arm space of
//! `(pruning ratio, LoRA rank)`.
//!
//! The agent works in the unit square; `u[0]` maps affinely onto
//! `[p_lo, p_target]` and `u[1]` onto `[r_min, r_max]`. Each leaf region keeps
//! a discounted pull count and reward sum, stored relative to the round they
//! were last touched and decayed lazily by `lambda^(t - t_ref)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.99;
pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_R_MIN: usize = 2;
pub const DEFAULT_R_MAX: usize = 32;
/// Floor on the completion-time gap in the reward denominator.
pub const EPS_T: f64 = 1e-3;
/// Floor on the ratio increment once the target ratio is reached.
pub const SATURATED_DP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditParams {
    pub lambda: f64,
    pub delta: f64,
    pub r_min: usize,
    pub r_max: usize,
    pub p_target: f64,
}

impl Default for BanditParams {
    fn default() -> Self {
        BanditParams {
            lambda: DEFAULT_LAMBDA,
            delta: DEFAULT_DELTA,
            r_min: DEFAULT_R_MIN,
            r_max: DEFAULT_R_MAX,
            p_target: 0.3,
        }
    }
}

impl BanditParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::arg(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::arg(format!("delta must be positive, got {}", self.delta)));
        }
        if self.r_min == 0 || self.r_min > self.r_max {
            return Err(Error::arg(format!("bad rank range [{}, {}]", self.r_min, self.r_max)));
        }
        if !(0.0..=1.0).contains(&self.p_target) {
            return Err(Error::arg(format!("p_target must lie in [0, 1], got {}", self.p_target)));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle `[lo, hi]` in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    pub const UNIT: Rect = Rect {
        lo: [0.0, 0.0],
        hi: [1.0, 1.0],
    };

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    /// L∞ diameter.
    pub fn diameter(&self) -> f64 {
        (self.hi[0] - self.lo[0]).max(self.hi[1] - self.lo[1])
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.lo[0] + self.hi[0]) / 2.0, (self.lo[1] + self.hi[1]) / 2.0]
    }

    pub fn contains(&self, u: [f64; 2]) -> bool {
        (0..2).all(|i| self.lo[i] <= u[i] && u[i] <= self.hi[i])
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        (0..2).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    /// Euclidean distance from `u` to the nearest point of the rectangle.
    pub fn distance_to(&self, u: [f64; 2]) -> f64 {
        (0..2)
            .map(|i| (self.lo[i] - u[i]).max(0.0).max(u[i] - self.hi[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// The four quadrants around `at`, in order (low p, low r), (high p, low r),
    /// (low p, high r), (high p, high r).
    pub fn quadrants(&self, at: [f64; 2]) -> [Rect; 4] {
        let [x, y] = at;
        [
            Rect { lo: self.lo, hi: [x, y] },
            Rect { lo: [x, self.lo[1]], hi: [self.hi[0], y] },
            Rect { lo: [self.lo[0], y], hi: [x, self.hi[1]] },
            Rect { lo: [x, y], hi: self.hi },
        ]
    }
}

/// Discounted statistics valid at round `t_ref`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Discounted {
    pub count: f64,
    pub reward: f64,
    pub t_ref: u64,
}

impl Discounted {
    /// `(count, reward sum)` decayed to round `t` (never earlier than `t_ref`).
    pub fn at(&self, t: u64, lambda: f64) -> (f64, f64) {
        let w = lambda.powi(t.saturating_sub(self.t_ref) as i32);
        (self.count * w, self.reward * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub rect: Rect,
    pub stats: Discounted,
    pub children: Option<[usize; 4]>,
    pub parent: Option<usize>,
}

/// Result of [`SUcbAgent::select_arm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub leaf: usize,
    /// Arm in normalized coordinates (the leaf center).
    pub u: [f64; 2],
    pub p: f64,
    pub r: usize,
    /// Discounted count `N_t` of the leaf.
    pub count: f64,
    /// Discounted empirical mean reward (0 when unvisited).
    pub mean: f64,
    /// Padding term `c_t` (infinite when unvisited).
    pub bonus: f64,
    pub ucb: f64,
}

/// One line of the pull log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullRecord {
    pub round: u64,
    pub device: usize,
    pub p: f64,
    pub r: usize,
    pub reward: f64,
    pub leaf: Rect,
    #[serde(rename = "N")]
    pub count: f64,
    #[serde(rename = "R_bar")]
    pub mean: f64,
    /// `null` for an unvisited leaf.
    pub c: Option<f64>,
    #[serde(rename = "U")]
    pub ucb: Option<f64>,
}

impl PullRecord {
    pub fn new(round: u64, device: usize, sel: &Selection, rect: Rect, reward: f64) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        PullRecord {
            round,
            device,
            p: sel.p,
            r: sel.r,
            reward,
            leaf: rect,
            count: sel.count,
            mean: sel.mean,
            c: finite(sel.bonus),
            ucb: finite(sel.ucb),
        }
    }
}

/// Smooth-UCB agent for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct SUcbAgent {
    params: BanditParams,
    regions: Vec<Region>,
    p_lo: f64,
    saturated: bool,
}

impl SUcbAgent {
    pub fn new(params: BanditParams, p_lo: f64) -> Result<Self> {
        params.validate()?;
        if !(0.0..=params.p_target).contains(&p_lo) {
            return Err(Error::arg(format!(
                "initial lower bound {p_lo} outside [0, {}]",
                params.p_target
            )));
        }
        Ok(SUcbAgent {
            params,
            regions: vec![Region {
                rect: Rect::UNIT,
                stats: Discounted::default(),
                children: None,
                parent: None,
            }],
            p_lo,
            saturated: p_lo >= params.p_target,
        })
    }

    pub fn params(&self) -> &BanditParams {
        &self.params
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn p_lower(&self) -> f64 {
        self.p_lo
    }

    /// True once the pruning-ratio interval has collapsed onto `p_target`.
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// Leaf indices in creation order.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.regions.len())
            .filter(|&i| self.regions[i].children.is_none())
            .collect()
    }

    /// Maps normalized coordinates to `(p, r)`.
    pub fn to_raw(&self, u: [f64; 2]) -> (f64, usize) {
        let p = self.p_lo + u[0] * (self.params.p_target - self.p_lo);
        let (lo, hi) = (self.params.r_min as f64, self.params.r_max as f64);
        let r = (lo + u[1] * (hi - lo)).round().clamp(lo, hi) as usize;
        (p.min(self.params.p_target), r)
    }

    /// Total discounted pull count `n_t` over all leaves.
    pub fn total_count(&self, t: u64) -> f64 {
        self.leaves()
            .iter()
            .map(|&i| self.regions[i].stats.at(t, self.params.lambda).0)
            .sum()
    }

    /// `(N_t, R̄_t, c_t, U_t)` of region `i` at round `t`.
    pub fn bound(&self, i: usize, t: u64) -> (f64, f64, f64, f64) {
        let (n, s) = self.regions[i].stats.at(t, self.params.lambda);
        if n <= 0.0 {
            return (0.0, 0.0, f64::INFINITY, f64::INFINITY);
        }
        let total = self.total_count(t).max(1.0);
        let mean = s / n;
        let bonus = (2.0 * total.ln() / n).sqrt();
        (n, mean, bonus, mean + bonus)
    }

    /// Leaf with the largest upper confidence bound; earliest-created on ties.
    pub fn select_arm(&self, t: u64) -> Selection {
        let total = self.total_count(t).max(1.0);
        let log_total = total.ln();
        let mut best: Option<Selection> = None;
        for leaf in self.leaves() {
            let (n, s) = self.regions[leaf].stats.at(t, self.params.lambda);
            let (mean, bonus) = if n > 0.0 {
                (s / n, (2.0 * log_total / n).sqrt())
            } else {
                (0.0, f64::INFINITY)
            };
            let ucb = mean + bonus;
            if best.as_ref().is_none_or(|b| ucb > b.ucb) {
                let u = self.regions[leaf].rect.center();
                let (p, r) = self.to_raw(u);
                best = Some(Selection {
                    leaf,
                    u,
                    p,
                    r,
                    count: n,
                    mean,
                    bonus,
                    ucb,
                });
            }
        }
        best.expect("the tree always has a leaf")
    }

    /// Credits `reward` to `leaf` at round `t`, then splits the leaf at `u`
    /// when its diameter exceeds `delta`.
    pub fn observe_reward(&mut self, leaf: usize, u: [f64; 2], reward: f64, t: u64) -> Result<()> {
        let region = self
            .regions
            .get(leaf)
            .ok_or_else(|| Error::arg(format!("no region {leaf}")))?;
        if region.children.is_some() {
            return Err(Error::arg(format!("region {leaf} is not a leaf")));
        }
        if !reward.is_finite() {
            return Err(Error::Numerical(format!("non-finite reward {reward}")));
        }
        if t < region.stats.t_ref {
            return Err(Error::arg(format!("round {t} precedes last update {}", region.stats.t_ref)));
        }
        let (n, s) = region.stats.at(t, self.params.lambda);
        self.regions[leaf].stats = Discounted {
            count: n + 1.0,
            reward: s + reward,
            t_ref: t,
        };
        if self.regions[leaf].rect.diameter() > self.params.delta {
            self.split(leaf, u)?;
        }
        Ok(())
    }

    /// Quadrisects a leaf at `at`; children inherit stats in proportion to area.
    pub fn split(&mut self, leaf: usize, at: [f64; 2]) -> Result<()> {
        let parent = self.regions[leaf].clone();
        if parent.children.is_some() {
            return Err(Error::arg(format!("region {leaf} is already split")));
        }
        let r = parent.rect;
        if !(0..2).all(|i| r.lo[i] < at[i] && at[i] < r.hi[i]) {
            return Err(Error::arg(format!("split point {at:?} not interior to {r:?}")));
        }
        let area = r.area();
        let first = self.regions.len();
        for q in r.quadrants(at) {
            let share = q.area() / area;
            self.regions.push(Region {
                rect: q,
                stats: Discounted {
                    count: parent.stats.count * share,
                    reward: parent.stats.reward * share,
                    t_ref: parent.stats.t_ref,
                },
                children: None,
                parent: Some(leaf),
            });
        }
        self.regions[leaf].children = Some([first, first + 1, first + 2, first + 3]);
        Ok(())
    }

    /// Raises the lower end of the pruning-ratio axis to `bound`.
    ///
    /// Leaves whose whole raw-`p` image under the old map lies below `bound`
    /// lose their statistics. Returns the indices of those leaves. A bound
    /// above `p_target` collapses the axis and yields [`Error::Saturated`];
    /// the agent then keeps serving `p_target` and adapts the rank only.
    pub fn rebase_arm_space(&mut self, bound: f64) -> Result<Vec<usize>> {
        if bound < self.p_lo {
            return Err(Error::arg(format!(
                "lower bound may not decrease: {} -> {bound}",
                self.p_lo
            )));
        }
        if bound == self.p_lo {
            return Ok(Vec::new());
        }
        let target = self.params.p_target;
        let clamped = bound.min(target);
        let width = target - self.p_lo;
        let retired: Vec<usize> = self
            .leaves()
            .into_iter()
            .filter(|&i| self.p_lo + self.regions[i].rect.hi[0] * width < clamped)
            .collect();
        for &i in &retired {
            self.regions[i].stats = Discounted::default();
        }
        self.p_lo = clamped;
        self.saturated = clamped >= target;
        if bound > target {
            return Err(Error::Saturated { bound, target });
        }
        Ok(retired)
    }
}

/// Inputs of one device's round reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    /// Local loss decrease during the round.
    pub delta_f: f64,
    /// Assigned ratio minus the previous ratio.
    pub delta_p: f64,
    /// `I(B^total)` of the device's modules.
    pub importance: f64,
    /// `|T_i − mean_j T_j|`.
    pub delta_t: f64,
    /// The ratio axis has collapsed onto the target.
    pub saturated: bool,
}

pub fn compute_reward(x: &RewardInputs) -> f64 {
    let dp = if x.saturated {
        x.delta_p.max(SATURATED_DP)
    } else {
        x.delta_p
    };
    x.delta_f * dp * x.importance / x.delta_t.max(EPS_T)
}

/// Running sum of `best − achieved` gaps.
pub fn cumulative_regret(best: f64, achieved: &[f64]) -> Vec<f64> {
    achieved
        .iter()
        .scan(0.0, |acc, &r| {
            *acc += best - r;
            Some(*acc)
        })
        .collect()
}
