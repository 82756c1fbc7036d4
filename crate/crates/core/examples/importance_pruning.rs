//! Scores heads and FFN channels with the LoRA-guided criterion over a few
//! batches, then prunes the least important groups to a target ratio.
//!
//! cargo run --release --example importance_pruning

use fedspine::data::{SyntheticTask, TaskSpec};
use fedspine::model::{apply_masks, loss_and_grads, Adapters, ClassifierHead, FrozenModel, MaskSet, ModelConfig};
use fedspine::numkit::RngStream;
use fedspine::pruning::{group_importance, lora_guided_scores, select_and_mask, DependencyMap, GroupImportanceState};

fn main() -> fedspine::Result<()> {
    let config = ModelConfig::default();
    let mut rng = RngStream::new(5, 0);
    let model = FrozenModel::random(config, &mut rng)?;
    let task = SyntheticTask::new(TaskSpec::for_model(&config), &mut rng)?;
    let data = task.sample(64, &mut rng);
    let head = ClassifierHead::random(&config, 0.1, &mut rng);
    let adapters = Adapters::init(&config, 8, 16.0, head, &mut rng)?;
    let map = DependencyMap::for_model(&config);
    let mut masks = MaskSet::full(&config);
    let mut state = GroupImportanceState::new(&config, 0.9)?;

    for step in 0..20 {
        let idx: Vec<usize> = (0..32).map(|j| (step * 32 + j) % data.len()).collect();
        let batch = data.batch(&idx, &config)?;
        let (_, grads) = loss_and_grads(&model, &adapters, &masks, &batch)?;
        let scores = adapters
            .loras
            .iter()
            .zip(&grads.lora)
            .map(|(m, (gb, ga))| lora_guided_scores(model.weight(m.host), m, gb, ga))
            .collect::<fedspine::Result<Vec<_>>>()?;
        state.update(&group_importance(&config, &map, &scores)?, &masks)?;
    }

    let heads: Vec<String> = state.theta[0][..config.num_heads].iter().map(|s| format!("{s:.2e}")).collect();
    println!("head scores: {}", heads.join(" "));
    for target in [0.1, 0.3, 0.5] {
        let decision = select_and_mask(&config, &state, &masks, target)?;
        apply_masks(&mut masks, &decision.clear)?;
        println!(
            "target {target:.1}: cleared {} groups, ratio {:.4}, heads left {}, channels left {}",
            decision.clear.len(),
            masks.pruned_ratio(&config),
            masks.active_heads(0),
            masks.active_channels(0)
        );
    }
    Ok(())
}
