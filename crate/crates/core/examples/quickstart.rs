//! Runs a short federated experiment round by round and prints its progress.
//!
//! cargo run --release --example quickstart

use fedspine::config::{ExperimentConfig, Mode};
use fedspine::fedsim::Experiment;

fn main() -> fedspine::Result<()> {
    let config = ExperimentConfig {
        rounds: 12,
        devices: 6,
        tau: 10,
        samples_per_class: 120,
        mode: Mode::Fedspine,
        seed: 3,
        ..ExperimentConfig::default()
    };
    config.validate()?;
    let mut exp = Experiment::new(config)?;
    println!("{:>5} {:>8} {:>8} {:>8} {:>7} {:>7}", "round", "acc", "loss", "gamma", "mean_p", "mean_r");
    while !exp.is_finished() {
        let out = exp.run_round(false)?;
        let r = &out.record;
        println!(
            "{:>5} {:>8.4} {:>8.4} {:>8.4} {:>7.3} {:>7.1}",
            r.round, r.global_acc, r.global_loss, r.gamma, r.mean_p, r.mean_r
        );
    }
    for d in exp.devices() {
        println!("device {} pruned {:.3}", d.id, d.pruned_ratio(&exp.config().model));
    }
    Ok(())
}
