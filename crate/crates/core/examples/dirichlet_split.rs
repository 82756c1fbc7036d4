//! Label skew of Dirichlet partitions across the usual concentration grid.
//!
//! cargo run --release --example dirichlet_split

use fedspine::data::{dirichlet_partition, SyntheticTask, TaskSpec};
use fedspine::model::ModelConfig;
use fedspine::numkit::RngStream;

fn main() -> fedspine::Result<()> {
    let config = ModelConfig::default();
    let mut rng = RngStream::new(0, 2);
    let task = SyntheticTask::new(TaskSpec::for_model(&config), &mut rng)?;
    let data = task.sample(100, &mut rng);
    for alpha in [10.0, 1.0, 0.5, 0.1] {
        let p = dirichlet_partition(&data.labels, data.num_classes, 5, alpha, &mut RngStream::new(1, 3))?;
        println!("alpha {alpha}:");
        for (d, idx) in p.devices.iter().enumerate() {
            let hist = data.subset(idx).class_histogram();
            println!("  device {d}: {:>4} samples, per class {hist:?}", idx.len());
        }
    }
    Ok(())
}
