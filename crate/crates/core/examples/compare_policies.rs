//! Paired comparison of the adaptive policy against the fixed and sequential
//! baselines over a few seeds.
//!
//! cargo run --release --example compare_policies

use fedspine::compare::compare;
use fedspine::config::{ExperimentConfig, Mode};

fn main() -> fedspine::Result<()> {
    let base = ExperimentConfig {
        rounds: 10,
        devices: 5,
        tau: 8,
        samples_per_class: 100,
        ..ExperimentConfig::default()
    };
    let policies: Vec<(String, ExperimentConfig)> = [
        Mode::Fedspine,
        Mode::FedaptUniform,
        Mode::PruneThenTune,
        Mode::TuneThenPrune,
        Mode::NoPruneHetlora,
    ]
    .into_iter()
    .map(|mode| (mode.name().to_string(), ExperimentConfig { mode, ..base.clone() }))
    .collect();
    let table = compare(&policies, &[0, 1, 2], 0.45, None)?;
    print!("{}", table.render());
    Ok(())
}
