//! Fast runtime checks of the core numerical invariants.

use serde::Serialize;

use crate::bandit::{BanditParams, SUcbAgent};
use crate::config::{parse_config_str, ExperimentConfig, Mode};
use crate::error::Result;
use crate::fedsim::{run_experiment, waiting_time, MetricsSink};
use crate::lora::LoraModule;
use crate::model::{evaluate, loss_and_grads, Adapters, Batch, ClassifierHead, FrozenModel, HostId, LayerKind, MaskSet, ModelConfig};
use crate::numkit::{gaussian_fill, svd_thin, RngStream};
use crate::pruning::{select_and_mask, update_moving_average, DependencyMap, GroupImportanceState};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn tiny_model() -> ModelConfig {
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

/// Runs every check; each reports its own pass flag.
pub fn run_selftest() -> Vec<Check> {
    vec![
        check("gradient-finite-difference", gradient_check),
        check("grow-rank-exact", grow_check),
        check("shrink-rank-optimal", shrink_check),
        check("dependency-partition", || {
            let c = ModelConfig::default();
            DependencyMap::for_model(&c).check_partition(&c)?;
            Ok((true, "every prunable entry in exactly one group".into()))
        }),
        check("moving-average-closed-form", || {
            let (eta, k, c) = (0.9, 7, 2.5);
            let mut theta = vec![vec![0.0]];
            for _ in 0..k {
                update_moving_average(&mut theta, &[vec![c]], eta)?;
            }
            let want = c * (1.0 - eta.powi(k));
            let err = (theta[0][0] - want).abs();
            Ok((err < 1e-12, format!("|err| = {err:.2e}")))
        }),
        check("prune-meets-target", || {
            let c = ModelConfig::default();
            let mut rng = RngStream::new(1, 1);
            let mut state = GroupImportanceState::new(&c, 0.9)?;
            for row in &mut state.theta {
                for v in row.iter_mut() {
                    *v = rng.uniform();
                }
            }
            let mut worst = f64::INFINITY;
            for k in 0..=10 {
                let target = k as f64 * 0.09;
                let mut masks = MaskSet::full(&c);
                let d = select_and_mask(&c, &state, &masks, target)?;
                crate::model::apply_masks(&mut masks, &d.clear)?;
                worst = worst.min(masks.pruned_ratio(&c) - target);
            }
            Ok((worst >= 0.0, format!("min(ratio - target) = {worst:.4}")))
        }),
        check("waiting-time", || {
            let g = waiting_time(&[1.0, 2.0, 3.0]);
            let z = waiting_time(&[0.3; 4]);
            Ok((g == 1.0 && z.abs() < 1e-12, format!("gamma {{1,2,3}} = {g}, identical = {z}")))
        }),
        check("bandit-discount", || {
            let mut a = SUcbAgent::new(
                BanditParams {
                    lambda: 0.5,
                    delta: 2.0,
                    ..BanditParams::default()
                },
                0.0,
            )?;
            let s = a.select_arm(1);
            a.observe_reward(s.leaf, s.u, 1.0, 1)?;
            let (n, mean, _, _) = a.bound(0, 3);
            Ok(((n - 0.25).abs() < 1e-15 && (mean - 1.0).abs() < 1e-15, format!("N = {n}, mean = {mean}")))
        }),
        check("config-round-trip", || {
            let mut c = ExperimentConfig::default();
            c.mode = Mode::TuneThenPrune;
            c.lr = 0.00123;
            let back = parse_config_str(&c.echo(), "echo")?;
            Ok((back == c, "parse(echo(c)) == c".into()))
        }),
        check("determinism", || {
            let mut c = ExperimentConfig {
                rounds: 2,
                devices: 2,
                tau: 2,
                batch_size: 4,
                samples_per_class: 8,
                test_per_class: 4,
                r_max: 6,
                uniform_rank: 2,
                ..ExperimentConfig::default()
            };
            c.model = tiny_model();
            let a = run_experiment(&c, &mut MetricsSink::none())?;
            let b = run_experiment(&c, &mut MetricsSink::none())?;
            Ok((a.records == b.records, "identical records from identical seeds".into()))
        }),
    ]
}

fn gradient_check() -> Result<(bool, String)> {
    let config = tiny_model();
    let mut rng = RngStream::new(7, 0);
    let model = FrozenModel::random(config, &mut rng)?;
    let head = ClassifierHead::random(&config, 0.5, &mut rng);
    let loras = config
        .hosts()
        .into_iter()
        .map(|h| {
            let (d, k) = config.host_shape(h.kind);
            LoraModule::from_factors(h, gaussian_fill(&mut rng, d, 2, 0.3), gaussian_fill(&mut rng, 2, k, 0.3), 16.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let adapters = Adapters { loras, head };
    let masks = MaskSet::full(&config);
    let inputs = gaussian_fill(&mut rng, 4 * config.seq_len, config.d_model, 1.0);
    let batch = Batch::new(inputs, vec![0, 1, 2, 1], &config)?;
    let (_, grads) = loss_and_grads(&model, &adapters, &masks, &batch)?;

    let h = 1e-5;
    let loss_at = |a: &Adapters| evaluate(&model, a, &masks, &batch).map(|(l, _)| l);
    let mut worst: f64 = 0.0;
    for (slot, (db, da)) in grads.lora.iter().enumerate() {
        for which in 0..2 {
            let g = if which == 0 { db } else { da };
            for idx in [0, g.len() / 2, g.len() - 1] {
                let bump = |delta: f64| {
                    let mut a = adapters.clone();
                    let (b, aa) = a.loras[slot].factors_mut();
                    let m = if which == 0 { b } else { aa };
                    m.data_mut()[idx] += delta;
                    a
                };
                let numeric = (loss_at(&bump(h))? - loss_at(&bump(-h))?) / (2.0 * h);
                let analytic = g.data()[idx];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn grow_check() -> Result<(bool, String)> {
    let mut rng = RngStream::new(3, 0);
    let host = HostId::new(0, LayerKind::Query);
    for _ in 0..20 {
        let r = 1 + rng.below(4);
        let m = LoraModule::from_factors(host, gaussian_fill(&mut rng, 8, r, 1.0), gaussian_fill(&mut rng, r, 8, 1.0), 16.0)?;
        let g = m.grow_rank(r + 1 + rng.below(3), &mut rng)?;
        if g.product() != m.product() {
            return Ok((false, "grown product differs".into()));
        }
    }
    Ok((true, "20 cases bitwise equal".into()))
}

fn shrink_check() -> Result<(bool, String)> {
    let mut rng = RngStream::new(4, 0);
    let host = HostId::new(0, LayerKind::Value);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = LoraModule::from_factors(host, gaussian_fill(&mut rng, 8, 6, 1.0), gaussian_fill(&mut rng, 6, 8, 1.0), 16.0)?;
        let keep = 1 + rng.below(5);
        let s = m.shrink_rank(keep)?;
        let residual = m.product().sub(&s.product())?.frobenius_norm().powi(2);
        let discarded: f64 = svd_thin(&m.product())?.s[keep..].iter().map(|x| x * x).sum();
        worst = worst.max((residual - discarded).abs());
    }
    Ok((worst < 1e-9, format!("max |residual - discarded| = {worst:.2e}")))
}
