//! Heterogeneous device profiles: how rank and pruning move per-round latency
//! and the resulting waiting time.
//!
//! cargo run --release --example device_latency

use fedspine::config::ExperimentConfig;
use fedspine::fedsim::{simulate_latency, waiting_time, DeviceProfile};
use fedspine::model::{apply_masks, GroupId, MaskSet};
use fedspine::numkit::RngStream;

fn main() {
    let config = ExperimentConfig::default();
    let model = config.model;
    let profiles: Vec<DeviceProfile> = (0..5)
        .map(|i| DeviceProfile::sample(&config, &mut RngStream::new(config.seed, 100_000 + i)))
        .collect();
    let full = MaskSet::full(&model);
    let mut pruned = full.clone();
    let channels: Vec<GroupId> = (model.num_heads..model.num_heads + model.ffn_channels / 2)
        .map(|g| GroupId::new(0, g))
        .collect();
    apply_masks(&mut pruned, &channels).unwrap();

    for (label, masks, rank) in [("rank 8, dense", &full, 8), ("rank 32, dense", &full, 32), ("rank 8, half the channels", &pruned, 8)] {
        let times: Vec<f64> = profiles
            .iter()
            .map(|p| simulate_latency(p, 1, &model, masks, rank, config.tau, config.batch_size).total())
            .collect();
        let shown: Vec<String> = times.iter().map(|t| format!("{t:.3}")).collect();
        println!("{label:<26} times [{}] gamma {:.3}", shown.join(", "), waiting_time(&times));
    }
    for p in &profiles {
        println!(
            "compute {:.2e} s/MAC, bandwidth {:.2e} B/s, mode multiplier by period {:.2} {:.2} {:.2}",
            p.compute_factor,
            p.bandwidth,
            p.mode_multiplier(1),
            p.mode_multiplier(1 + p.mode_period),
            p.mode_multiplier(1 + 2 * p.mode_period)
        );
    }
}
