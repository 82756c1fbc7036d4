//! Round-based federated simulation over heterogeneous devices.
//!
//! Each round the server assigns every participating device a pruning ratio
//! and a LoRA rank, hands out the global adapters at that rank, lets the
//! devices train and prune locally, then aggregates the uploads. Device work
//! runs on a worker pool; every device owns its random stream and uploads are
//! combined in device order, so results do not depend on scheduling.

mod device;
mod metrics;
mod server;

pub use device::{
    local_device_round, simulate_latency, DeviceProfile, DeviceState, Latency, LocalContext, LocalOutcome,
};
pub use metrics::{
    DeviceRecord, ImportanceRow, MetricsSink, RoundRecord, IMPORTANCE_HEADER, SUMMARY_HEADER,
};
pub use server::{
    aggregate_heads, aggregate_products, aggregation_weights, homogeneous_average, waiting_time, GlobalLora,
};

use rand::seq::index::sample;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::bandit::{compute_reward, BanditParams, PullRecord, RewardInputs, SUcbAgent, Selection};
use crate::config::{ExperimentConfig, Mode};
use crate::data::{dirichlet_partition, Dataset, SyntheticTask, TaskSpec};
use crate::error::{Error, Result};
use crate::lora::LoraModule;
use crate::model::{evaluate, Adapters, Batch, ClassifierHead, FrozenModel, GroupId, MaskSet};
use crate::numkit::RngStream;
use crate::pruning::{DependencyMap, GroupImportanceState};

/// Ranks handed out round-robin by [`Mode::NoPruneHetlora`].
pub const HETEROGENEOUS_RANKS: [usize; 5] = [2, 4, 8, 16, 32];
const HEAD_SIGMA: f64 = 0.1;

const STREAM_MODEL: u64 = 1;
const STREAM_TASK: u64 = 2;
const STREAM_PARTITION: u64 = 3;
const STREAM_SERVER: u64 = 4;
const STREAM_DEVICE: u64 = 1_000;
const STREAM_PROFILE: u64 = 100_000;

/// What the server remembers between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: GlobalLora,
    pub head: ClassifierHead,
    /// One agent per device under [`Mode::Fedspine`], empty otherwise.
    pub agents: Vec<SUcbAgent>,
    /// Rounds completed.
    pub round: usize,
}

/// Ratio and rank assigned to one device for one round.
#[derive(Debug, Clone)]
struct Assignment {
    device: usize,
    p: f64,
    r: usize,
    train: bool,
    selection: Option<Selection>,
    saturated: bool,
}

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub record: RoundRecord,
    pub pulls: Vec<PullRecord>,
    pub importance: Vec<ImportanceRow>,
}

/// A configured simulation, advanced one round at a time.
pub struct Experiment {
    config: ExperimentConfig,
    model: FrozenModel,
    train: Dataset,
    test: Batch,
    map: DependencyMap,
    devices: Vec<DeviceState>,
    server: ServerState,
    rng: RngStream,
    pool: ThreadPool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mc = config.model;
        let model = FrozenModel::random(mc, &mut RngStream::new(seed, STREAM_MODEL))?;
        let mut task_rng = RngStream::new(seed, STREAM_TASK);
        let spec = TaskSpec {
            noise: config.noise,
            ..TaskSpec::for_model(&mc)
        };
        let task = SyntheticTask::new(spec, &mut task_rng)?;
        let train = task.sample(config.samples_per_class, &mut task_rng);
        let test = task.sample(config.test_per_class, &mut task_rng).as_batch(&mc)?;
        let partition = dirichlet_partition(
            &train.labels,
            mc.num_classes,
            config.devices,
            config.dirichlet_alpha,
            &mut RngStream::new(seed, STREAM_PARTITION),
        )?;
        let devices = partition
            .devices
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                Ok(DeviceState {
                    id,
                    profile: DeviceProfile::sample(&config, &mut RngStream::new(seed, STREAM_PROFILE + id as u64)),
                    shard,
                    masks: MaskSet::full(&mc),
                    importance: GroupImportanceState::new(&mc, config.eta)?,
                    rng: RngStream::new(seed, STREAM_DEVICE + id as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rng = RngStream::new(seed, STREAM_SERVER);
        let head = ClassifierHead::random(&mc, HEAD_SIGMA, &mut rng);
        let global = match config.mode {
            Mode::Fedspine | Mode::NoPruneHetlora => GlobalLora::zero_products(&mc),
            Mode::FedaptUniform | Mode::PruneThenTune | Mode::TuneThenPrune => GlobalLora::Factors(
                mc.hosts()
                    .into_iter()
                    .map(|h| LoraModule::init(h, mc.host_shape(h.kind), config.uniform_rank, config.lora_alpha, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let agents = if config.mode == Mode::Fedspine {
            let params = BanditParams {
                lambda: config.lambda,
                delta: config.delta,
                r_min: config.r_min,
                r_max: config.r_max,
                p_target: config.p_target,
            };
            (0..config.devices)
                .map(|_| SUcbAgent::new(params, 0.0))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
        Ok(Experiment {
            map: DependencyMap::for_model(&mc),
            config,
            model,
            train,
            test,
            devices,
            server: ServerState {
                global,
                head,
                agents,
                round: 0,
            },
            rng,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &FrozenModel {
        &self.model
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_batch(&self) -> &Batch {
        &self.test
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    /// Lets callers pin profiles or shards before the first round.
    pub fn devices_mut(&mut self) -> &mut [DeviceState] {
        &mut self.devices
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.config.rounds
    }

    fn participants(&mut self) -> Vec<usize> {
        let n = self.config.devices;
        let m = self.config.participants();
        if m >= n {
            return (0..n).collect();
        }
        let mut chosen = sample(&mut self.rng, n, m).into_vec();
        chosen.sort_unstable();
        chosen
    }

    fn assign(&mut self, device: usize, t: usize) -> Result<Assignment> {
        let c = &self.config;
        let target = c.p_target;
        let mut a = Assignment {
            device,
            p: 0.0,
            r: c.uniform_rank,
            train: true,
            selection: None,
            saturated: false,
        };
        match c.mode {
            Mode::Fedspine => {
                let ratio = self.devices[device].pruned_ratio(&c.model);
                let agent = &mut self.server.agents[device];
                if ratio > agent.p_lower() {
                    match agent.rebase_arm_space(ratio) {
                        Ok(_) | Err(Error::Saturated { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
                let sel = agent.select_arm(t as u64);
                a.saturated = agent.saturated();
                a.p = if a.saturated { target } else { sel.p };
                a.r = sel.r;
                a.selection = Some(sel);
            }
            Mode::FedaptUniform => {
                let ramp = c.rounds.div_ceil(2).max(1);
                a.p = target * (t as f64 / ramp as f64).min(1.0);
            }
            Mode::PruneThenTune => {
                a.p = target;
                a.train = t > 1 || c.rounds == 1 || target == 0.0;
            }
            Mode::TuneThenPrune => {
                a.p = if t == c.rounds { target } else { 0.0 };
            }
            Mode::NoPruneHetlora => {
                a.r = HETEROGENEOUS_RANKS[device % HETEROGENEOUS_RANKS.len()].clamp(c.r_min, c.r_max);
            }
        }
        Ok(a)
    }

    /// Runs the next round: assignment, distribution, local work, aggregation
    /// and evaluation.
    pub fn run_round(&mut self, want_importance: bool) -> Result<RoundOutput> {
        if self.is_finished() {
            return Err(Error::arg(format!("all {} rounds already ran", self.config.rounds)));
        }
        let t = self.server.round + 1;
        let participants = self.participants();
        let prev_ratio: Vec<f64> = participants
            .iter()
            .map(|&i| self.devices[i].pruned_ratio(&self.config.model))
            .collect();
        let assignments = participants
            .iter()
            .map(|&i| self.assign(i, t))
            .collect::<Result<Vec<_>>>()?;

        let c = self.config.clone();
        let mc = c.model;
        let ctx = LocalContext {
            model: &self.model,
            train: &self.train,
            map: &self.map,
            lr: c.lr,
            batch_size: c.batch_size,
            tau: c.tau,
            optimizer: c.optimizer,
        };
        let server = &self.server;
        let mut jobs: Vec<(&mut DeviceState, &Assignment)> = self
            .devices
            .iter_mut()
            .filter(|d| participants.contains(&d.id))
            .zip(&assignments)
            .collect();
        let outcomes: Vec<Result<(LocalOutcome, Latency)>> = self.pool.install(|| {
            jobs.par_iter_mut()
                .map(|(dev, a)| {
                    let loras = server.global.distribute(&mc, a.r, c.lora_alpha, &mut dev.rng)?;
                    let adapters = Adapters {
                        loras,
                        head: server.head.clone(),
                    };
                    let out = local_device_round(&ctx, dev, adapters, a.p, a.train)?;
                    let lat = simulate_latency(&dev.profile, t, &mc, &dev.masks, a.r, c.tau, c.batch_size);
                    Ok((out, lat))
                })
                .collect()
        });
        drop(jobs);
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        self.aggregate(&outcomes)?;

        let times: Vec<f64> = outcomes.iter().map(|(_, l)| l.total()).collect();
        let gamma = waiting_time(&times);
        let mean_t = times.iter().sum::<f64>() / times.len() as f64;
        let rewards: Vec<Option<f64>> = outcomes
            .iter()
            .zip(&assignments)
            .enumerate()
            .map(|(k, ((out, lat), a))| {
                a.selection.as_ref().map(|_| {
                    compute_reward(&RewardInputs {
                        delta_f: out.delta_f,
                        delta_p: a.p - prev_ratio[k],
                        importance: out.importance,
                        delta_t: (lat.total() - mean_t).abs(),
                        saturated: a.saturated,
                    })
                })
            })
            .collect();
        let mut pulls = Vec::new();
        let mut records = Vec::with_capacity(outcomes.len());
        for ((out, lat), (a, reward)) in outcomes.iter().zip(assignments.iter().zip(&rewards)) {
            let reward = match (&a.selection, reward) {
                (Some(sel), &Some(reward)) => {
                    let agent = &mut self.server.agents[a.device];
                    let rect = agent.regions()[sel.leaf].rect;
                    agent.observe_reward(sel.leaf, sel.u, reward, t as u64)?;
                    pulls.push(PullRecord::new(t as u64, a.device, sel, rect, reward));
                    Some(reward)
                }
                _ => None,
            };
            records.push(DeviceRecord {
                device: a.device,
                p: a.p,
                r: a.r,
                t_comp: lat.comp,
                t_comm: lat.comm,
                t_total: lat.total(),
                delta_f: out.delta_f,
                pruned_ratio: self.devices[a.device].pruned_ratio(&mc),
                importance: out.importance,
                reward,
            });
        }
        let violations = records.iter().filter(|r| r.pruned_ratio < r.p - 1e-12).count();
        let (global_loss, global_acc) = self.evaluate_global()?;
        let n = records.len() as f64;
        let record = RoundRecord {
            round: t,
            mode: c.mode.to_string(),
            gamma,
            round_time: times.iter().copied().fold(0.0, f64::max),
            global_acc,
            global_loss,
            mean_p: records.iter().map(|r| r.p).sum::<f64>() / n,
            mean_r: records.iter().map(|r| r.r as f64).sum::<f64>() / n,
            violations,
            devices: records,
        };
        let importance = if want_importance {
            self.importance_rows(t, &participants)
        } else {
            Vec::new()
        };
        self.server.round = t;
        Ok(RoundOutput {
            record,
            pulls,
            importance,
        })
    }

    fn aggregate(&mut self, outcomes: &[(LocalOutcome, Latency)]) -> Result<()> {
        let uploads: Vec<&Adapters> = outcomes.iter().map(|(o, _)| &o.adapters).collect();
        let uniform = aggregation_weights(&vec![0.0; uploads.len()]);
        match self.config.mode {
            Mode::Fedspine => {
                let imp: Vec<f64> = outcomes.iter().map(|(o, _)| o.importance).collect();
                let w = aggregation_weights(&imp);
                self.server.global = GlobalLora::Products(aggregate_products(&uploads, &w)?);
                self.server.head = aggregate_heads(&uploads, &w)?;
            }
            Mode::NoPruneHetlora => {
                self.server.global = GlobalLora::Products(aggregate_products(&uploads, &uniform)?);
                self.server.head = aggregate_heads(&uploads, &uniform)?;
            }
            Mode::FedaptUniform | Mode::PruneThenTune | Mode::TuneThenPrune => {
                let factors: Vec<&[LoraModule]> = uploads.iter().map(|a| a.loras.as_slice()).collect();
                self.server.global = GlobalLora::Factors(homogeneous_average(&factors)?);
                self.server.head = aggregate_heads(&uploads, &uniform)?;
            }
        }
        Ok(())
    }

    /// The global update merged into the frozen weights.
    pub fn merged_model(&self) -> Result<FrozenModel> {
        let mut model = self.model.clone();
        for (h, delta) in self.model.config().hosts().into_iter().zip(self.server.global.deltas()) {
            let w = model.weight(h).add(&delta)?;
            model = model.with_weight(h, w)?;
        }
        Ok(model)
    }

    /// Mean test loss and accuracy of the merged model under each device's masks.
    pub fn evaluate_global(&self) -> Result<(f64, f64)> {
        let merged = self.merged_model()?;
        let adapters = Adapters::frozen_only(self.server.head.clone());
        let scores: Vec<Result<(f64, f64)>> = self.pool.install(|| {
            self.devices
                .par_iter()
                .map(|d| evaluate(&merged, &adapters, &d.masks, &self.test))
                .collect()
        });
        let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        Ok((
            scores.iter().map(|s| s.0).sum::<f64>() / n,
            scores.iter().map(|s| s.1).sum::<f64>() / n,
        ))
    }

    fn importance_rows(&self, round: usize, participants: &[usize]) -> Vec<ImportanceRow> {
        let mut rows = Vec::new();
        for &i in participants {
            let d = &self.devices[i];
            for (g, kept) in d.masks.iter_groups() {
                rows.push(ImportanceRow {
                    round,
                    device: i,
                    layer: g.layer,
                    group: g.group,
                    score: d.importance.score(GroupId::new(g.layer, g.group)),
                    masked: !kept,
                });
            }
        }
        rows
    }
}

/// Outcome of a complete run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
}

impl RunSummary {
    pub fn final_acc(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.global_acc)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.global_loss)
    }

    pub fn mean_gamma(&self) -> f64 {
        self.records.iter().map(|r| r.gamma).sum::<f64>() / self.records.len() as f64
    }

    pub fn total_violations(&self) -> usize {
        self.records.iter().map(|r| r.violations).sum()
    }

    /// Simulated wall-clock time until the global accuracy first reaches `acc`.
    pub fn time_to_accuracy(&self, acc: f64) -> Option<f64> {
        let mut elapsed = 0.0;
        for r in &self.records {
            elapsed += r.round_time;
            if r.global_acc >= acc {
                return Some(elapsed);
            }
        }
        None
    }

    /// True when any recorded loss is not finite.
    pub fn diverged(&self) -> bool {
        self.records.iter().any(|r| {
            !r.global_loss.is_finite() || r.devices.iter().any(|d| !d.delta_f.is_finite())
        })
    }
}

/// Runs every round of `config`, streaming records into `sink`.
pub fn run_experiment(config: &ExperimentConfig, sink: &mut MetricsSink) -> Result<RunSummary> {
    let mut exp = Experiment::new(config.clone())?;
    let mut records = Vec::with_capacity(config.rounds);
    while !exp.is_finished() {
        let out = exp.run_round(sink.wants_importance())?;
        sink.write_round(&out.record, &out.pulls, &out.importance)?;
        records.push(out.record);
    }
    Ok(RunSummary {
        config: config.clone(),
        records,
    })
}
