#![allow(dead_code)]

use fedspine::config::{ExperimentConfig, Mode};
use fedspine::lora::LoraModule;
use fedspine::model::{
    loss_and_grads, Adapters, Batch, ClassifierHead, FrozenModel, MaskSet, ModelConfig,
};
use fedspine::numkit::{gaussian_fill, Matrix, RngStream};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        num_heads: 2,
        head_dim: 4,
        ffn_channels: 6,
        num_blocks: 1,
        seq_len: 3,
        num_classes: 3,
    }
}

/// A few rounds over three devices on the small model.
pub fn tiny_experiment(mode: Mode) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        rounds: 4,
        devices: 3,
        tau: 3,
        batch_size: 8,
        samples_per_class: 20,
        test_per_class: 10,
        r_max: 6,
        uniform_rank: 4,
        mode,
        seed: 11,
        lr: 1e-2,
        ..ExperimentConfig::default()
    };
    c.model = small_config();
    c
}

pub fn random_batch(config: &ModelConfig, n: usize, rng: &mut RngStream) -> Batch {
    let inputs = gaussian_fill(rng, n * config.seq_len, config.d_model, 1.0);
    let labels = (0..n).map(|_| rng.below(config.num_classes)).collect();
    Batch::new(inputs, labels, config).unwrap()
}

/// Adapters with nonzero `b` so every gradient path is exercised.
pub fn random_adapters(config: &ModelConfig, rank: usize, rng: &mut RngStream) -> Adapters {
    let head = ClassifierHead::random(config, 0.5, rng);
    let loras = config
        .hosts()
        .into_iter()
        .map(|h| {
            let (d, k) = config.host_shape(h.kind);
            let b = gaussian_fill(rng, d, rank, 0.3);
            let a = gaussian_fill(rng, rank, k, 0.3);
            LoraModule::from_factors(h, b, a, 16.0).unwrap()
        })
        .collect();
    Adapters { loras, head }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn perturbed(m: &Matrix, idx: usize, delta: f64) -> Matrix {
    let mut out = m.clone();
    out.data_mut()[idx] += delta;
    out
}

/// Central finite differences against every LoRA and head parameter.
pub fn finite_difference_check(
    model: &FrozenModel,
    adapters: &Adapters,
    masks: &MaskSet,
    batch: &Batch,
    step: f64,
) -> FdReport {
    let (_, grads) = loss_and_grads(model, adapters, masks, batch).unwrap();
    let loss = |ad: &Adapters| loss_and_grads(model, ad, masks, batch).unwrap().0;
    let mut report = FdReport::default();
    let mut record = |analytic: f64, numeric: f64| {
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric));
    };

    for (slot, m) in adapters.loras.iter().enumerate() {
        let (db, da) = &grads.lora[slot];
        for idx in 0..m.b().len() {
            let mut plus = adapters.clone();
            let mut minus = adapters.clone();
            plus.loras[slot] =
                LoraModule::from_factors(m.host, perturbed(m.b(), idx, step), m.a().clone(), m.alpha()).unwrap();
            minus.loras[slot] =
                LoraModule::from_factors(m.host, perturbed(m.b(), idx, -step), m.a().clone(), m.alpha()).unwrap();
            record(db.data()[idx], (loss(&plus) - loss(&minus)) / (2.0 * step));
        }
        for idx in 0..m.a().len() {
            let mut plus = adapters.clone();
            let mut minus = adapters.clone();
            plus.loras[slot] =
                LoraModule::from_factors(m.host, m.b().clone(), perturbed(m.a(), idx, step), m.alpha()).unwrap();
            minus.loras[slot] =
                LoraModule::from_factors(m.host, m.b().clone(), perturbed(m.a(), idx, -step), m.alpha()).unwrap();
            record(da.data()[idx], (loss(&plus) - loss(&minus)) / (2.0 * step));
        }
    }
    for idx in 0..adapters.head.weight.len() {
        let mut plus = adapters.clone();
        let mut minus = adapters.clone();
        plus.head.weight = perturbed(&adapters.head.weight, idx, step);
        minus.head.weight = perturbed(&adapters.head.weight, idx, -step);
        record(grads.head_weight.data()[idx], (loss(&plus) - loss(&minus)) / (2.0 * step));
    }
    for idx in 0..adapters.head.bias.len() {
        let mut plus = adapters.clone();
        let mut minus = adapters.clone();
        plus.head.bias[idx] += step;
        minus.head.bias[idx] -= step;
        record(grads.head_bias[idx], (loss(&plus) - loss(&minus)) / (2.0 * step));
    }
    report
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Every bandit pull as `(round, pulled region, reward)`.
#[derive(Debug, Default)]
pub struct PullLog {
    pub pulls: Vec<(u64, fedspine::bandit::Rect, f64)>,
}

impl PullLog {
    pub fn push(&mut self, t: u64, rect: fedspine::bandit::Rect, reward: f64) {
        self.pulls.push((t, rect, reward));
    }
}

/// Discounted `(N, S)` of `leaf` at round `t`, rebuilt from the whole log.
///
/// A pull credited to region `R` reaches a later leaf `L ⊆ R` with weight
/// `area(L) / area(R)`, which is what area-proportional inheritance yields.
pub fn brute_force_stats(log: &PullLog, leaf: &fedspine::bandit::Rect, t: u64, lambda: f64) -> (f64, f64) {
    let inside = |outer: &fedspine::bandit::Rect| (0..2).all(|k| outer.lo[k] <= leaf.lo[k] && leaf.hi[k] <= outer.hi[k]);
    let mut n = 0.0;
    let mut s = 0.0;
    for &(round, rect, reward) in &log.pulls {
        if round > t || !inside(&rect) {
            continue;
        }
        let w = lambda.powi((t - round) as i32) * leaf.area() / rect.area();
        n += w;
        s += w * reward;
    }
    (n, s)
}
