//! Simulated devices: hardware profiles, latency and the local round.

use rand::seq::index::sample;
use serde::Serialize;

use crate::config::{ExperimentConfig, Optimizer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::{b_importance, module_importance};
use crate::model::{
    apply_masks, loss_and_grads, lora_wire_bytes, step_macs, Adapters, FrozenModel, GroupId, Gradients,
    MaskSet, ModelConfig,
};
use crate::numkit::RngStream;
use crate::pruning::{group_importance, lora_guided_scores, select_and_mask, DependencyMap, GroupImportanceState};

const MODE_MIN: f64 = 1.0;
const MODE_MAX: f64 = 2.0;

/// Static hardware of one device plus its power-mode schedule.
#[derive(Debug, Clone)]
pub struct DeviceProfile {
    /// Seconds per multiply-accumulate at mode multiplier 1.
    pub compute_factor: f64,
    /// Bytes per second, both directions.
    pub bandwidth: f64,
    pub mode_period: usize,
    modes: RngStream,
}

fn log_uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.uniform() * (hi.ln() - lo.ln())).exp()
}

impl DeviceProfile {
    pub fn sample(config: &ExperimentConfig, rng: &mut RngStream) -> Self {
        let compute_factor = log_uniform(rng, config.compute_base, config.compute_base * config.compute_span);
        let bandwidth = log_uniform(rng, config.bandwidth_min, config.bandwidth_max);
        DeviceProfile {
            compute_factor,
            bandwidth,
            mode_period: config.mode_period,
            modes: rng.substream(0x6d6f_6465),
        }
    }

    pub fn fixed(compute_factor: f64, bandwidth: f64) -> Self {
        DeviceProfile {
            compute_factor,
            bandwidth,
            mode_period: usize::MAX,
            modes: RngStream::new(0, 0),
        }
    }

    /// Compute slowdown in force during `round` (1-based); constant within each period.
    pub fn mode_multiplier(&self, round: usize) -> f64 {
        if self.mode_period == usize::MAX {
            return 1.0;
        }
        let epoch = round.saturating_sub(1) / self.mode_period;
        let mut rng = self.modes.substream(epoch as u64);
        MODE_MIN + rng.uniform() * (MODE_MAX - MODE_MIN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency {
    pub comp: f64,
    pub comm: f64,
}

impl Latency {
    pub fn total(&self) -> f64 {
        self.comp + self.comm
    }
}

/// Simulated compute and communication time of one round.
///
/// Compute covers `tau` training steps under `masks` at `rank`; communication
/// is one download and one upload of the adapters.
pub fn simulate_latency(
    profile: &DeviceProfile,
    round: usize,
    config: &ModelConfig,
    masks: &MaskSet,
    rank: usize,
    tau: usize,
    batch_size: usize,
) -> Latency {
    let macs = step_macs(config, masks, rank, batch_size) as f64 * tau as f64;
    Latency {
        comp: profile.compute_factor * profile.mode_multiplier(round) * macs,
        comm: 2.0 * lora_wire_bytes(config, rank) as f64 / profile.bandwidth,
    }
}

/// Persistent per-device state.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub profile: DeviceProfile,
    /// Indices into the shared training set.
    pub shard: Vec<usize>,
    pub masks: MaskSet,
    pub importance: GroupImportanceState,
    pub rng: RngStream,
}

impl DeviceState {
    pub fn pruned_ratio(&self, config: &ModelConfig) -> f64 {
        self.masks.pruned_ratio(config)
    }
}

/// What a local round needs besides the device itself.
pub struct LocalContext<'a> {
    pub model: &'a FrozenModel,
    pub train: &'a Dataset,
    pub map: &'a DependencyMap,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: usize,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub adapters: Adapters,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Loss on the first batch minus loss on the last batch.
    pub delta_f: f64,
    pub importance: f64,
    pub pruned: Vec<GroupId>,
}

/// Runs `tau` optimizer steps on the device's shard, folding LoRA-guided group
/// scores into the device's moving average each step, then prunes to `target`.
///
/// With `train == false` the adapters stay fixed and only scores accumulate.
pub fn local_device_round(
    ctx: &LocalContext<'_>,
    device: &mut DeviceState,
    mut adapters: Adapters,
    target: f64,
    train: bool,
) -> Result<LocalOutcome> {
    let config = ctx.model.config();
    if adapters.loras.is_empty() {
        return Err(Error::config("local round needs lora modules"));
    }
    let mut opt = OptimizerState::new(ctx.optimizer, &adapters);
    let mut b_scores = vec![0.0; adapters.loras.len()];
    let (mut first_loss, mut last_loss) = (0.0, 0.0);
    for step in 0..ctx.tau {
        let idx = draw_batch(&device.shard, ctx.batch_size, &mut device.rng);
        let batch = ctx.train.batch(&idx, config)?;
        let (loss, grads) = loss_and_grads(ctx.model, &adapters, &device.masks, &batch)?;
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;
        let scores = adapters
            .loras
            .iter()
            .zip(&grads.lora)
            .map(|(m, (db, da))| lora_guided_scores(ctx.model.weight(m.host), m, db, da))
            .collect::<Result<Vec<_>>>()?;
        let groups = group_importance(config, ctx.map, &scores)?;
        device.importance.update(&groups, &device.masks)?;
        for ((s, m), (db, _)) in b_scores.iter_mut().zip(&adapters.loras).zip(&grads.lora) {
            *s += b_importance(m.b(), db);
        }
        if train {
            opt.step(&mut adapters, &grads, ctx.lr);
        }
    }
    if ctx.tau > 0 {
        for s in &mut b_scores {
            *s /= ctx.tau as f64;
        }
    }
    let importance = module_importance(&adapters.loras, &b_scores, config.num_blocks)?.total;
    let decision = select_and_mask(config, &device.importance, &device.masks, target)?;
    apply_masks(&mut device.masks, &decision.clear)?;
    Ok(LocalOutcome {
        adapters,
        first_loss,
        last_loss,
        delta_f: first_loss - last_loss,
        importance,
        pruned: decision.clear,
    })
}

fn draw_batch(shard: &[usize], size: usize, rng: &mut RngStream) -> Vec<usize> {
    if shard.len() >= size {
        sample(rng, shard.len(), size).into_iter().map(|i| shard[i]).collect()
    } else {
        (0..size).map(|_| shard[rng.below(shard.len())]).collect()
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every trainable slice, reset each round.
struct OptimizerState {
    kind: Optimizer,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, adapters: &Adapters) -> Self {
        let mut sizes: Vec<usize> = adapters
            .loras
            .iter()
            .flat_map(|m| [m.b().len(), m.a().len()])
            .collect();
        sizes.push(adapters.head.weight.len());
        sizes.push(adapters.head.bias.len());
        let zeros = |n: &usize| vec![0.0; *n];
        let (m, v) = match kind {
            Optimizer::Adam => (sizes.iter().map(zeros).collect(), sizes.iter().map(zeros).collect()),
            Optimizer::Sgd => (Vec::new(), Vec::new()),
        };
        OptimizerState { kind, m, v, t: 0 }
    }

    fn step(&mut self, adapters: &mut Adapters, grads: &Gradients, lr: f64) {
        self.t += 1;
        let mut params: Vec<&mut [f64]> = Vec::new();
        for m in &mut adapters.loras {
            let (b, a) = m.factors_mut();
            params.push(b.data_mut());
            params.push(a.data_mut());
        }
        params.push(adapters.head.weight.data_mut());
        params.push(&mut adapters.head.bias);
        let mut g: Vec<&[f64]> = grads.lora.iter().flat_map(|(db, da)| [db.data(), da.data()]).collect();
        g.push(grads.head_weight.data());
        g.push(&grads.head_bias);

        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.into_iter().zip(g) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= lr * d;
                    }
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (k, (p, g)) in params.into_iter().zip(g).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
