mod common;

use common::small_config;
use fedspine::lora::LoraModule;
use fedspine::model::{apply_masks, GroupId, HostId, LayerKind, MaskSet, ModelConfig};
use fedspine::numkit::{gaussian_fill, Matrix, RngStream};
use fedspine::pruning::*;
use fedspine::Error;
use proptest::prelude::*;

/// Group owning entry `(i, j)` of a host, derived from the head/channel layout alone.
fn owner(config: &ModelConfig, kind: LayerKind, i: usize, j: usize) -> usize {
    match kind {
        LayerKind::Query | LayerKind::Key | LayerKind::Value => j / config.head_dim,
        LayerKind::Out => i / config.head_dim,
        LayerKind::Ffn1 => config.num_heads + j,
        LayerKind::Ffn2 => config.num_heads + i,
    }
}

fn random_scores(config: &ModelConfig, rng: &mut RngStream) -> Vec<Matrix> {
    config
        .hosts()
        .iter()
        .map(|h| {
            let (d, k) = config.host_shape(h.kind);
            gaussian_fill(rng, d, k, 1.0).map(f64::abs)
        })
        .collect()
}

#[test]
fn hand_evaluated_entry_score() {
    // sens = g_b·a + b·g_a − g_b·g_a = (2 + 3) + 0.5 − (0.5 − 1) = 6; (6 · 0.5)² = 9
    let s = lora_guided_importance(0.5, &[1.0, 1.0], &[1.0, 0.0], &[2.0, 3.0], &[0.5, -1.0]);
    assert_eq!(s, 9.0);
    assert_eq!(lora_guided_importance(0.0, &[1.0, 1.0], &[1.0, 0.0], &[2.0, 3.0], &[0.5, -1.0]), 0.0);
    assert_eq!(lora_guided_importance(3.0, &[0.0, 0.0], &[1.0, 2.0], &[2.0, 3.0], &[0.0, 0.0]), 0.0);
}

#[test]
fn matrix_scores_match_entrywise_formula() {
    let mut rng = RngStream::new(31, 0);
    let (d, k, r) = (5, 4, 3);
    let host = HostId::new(0, LayerKind::Key);
    let lora = LoraModule::from_factors(host, gaussian_fill(&mut rng, d, r, 1.0), gaussian_fill(&mut rng, r, k, 1.0), 16.0).unwrap();
    let w0 = gaussian_fill(&mut rng, d, k, 1.0);
    let gb = gaussian_fill(&mut rng, d, r, 1.0);
    let ga = gaussian_fill(&mut rng, r, k, 1.0);
    let scores = lora_guided_scores(&w0, &lora, &gb, &ga).unwrap();
    let delta = lora.delta();
    for i in 0..d {
        for j in 0..k {
            let want = lora_guided_importance(
                w0[(i, j)] + delta[(i, j)],
                gb.row(i),
                lora.b().row(i),
                &lora.a().col(j),
                &ga.col(j),
            );
            assert!((scores[(i, j)] - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}

#[test]
fn group_sums_match_naive_loop() {
    for (seed, config) in [(1, small_config()), (2, ModelConfig::default())] {
        let config = ModelConfig { num_blocks: 2, ..config };
        let mut rng = RngStream::new(seed, 0);
        let scores = random_scores(&config, &mut rng);
        let map = DependencyMap::for_model(&config);
        let got = group_importance(&config, &map, &scores).unwrap();
        let mut want = vec![vec![0.0; config.groups_per_block()]; config.num_blocks];
        for (h, s) in config.hosts().iter().zip(&scores) {
            for i in 0..s.rows() {
                for j in 0..s.cols() {
                    want[h.block][owner(&config, h.kind, i, j)] += s[(i, j)];
                }
            }
        }
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
        let entries: f64 = scores.iter().map(Matrix::sum).sum();
        let groups: f64 = got.iter().flatten().sum();
        assert!((entries - groups).abs() < 1e-9 * entries);
    }
}

#[test]
fn unit_scores_give_group_sizes() {
    let config = small_config();
    let ones: Vec<Matrix> = config
        .hosts()
        .iter()
        .map(|h| {
            let (d, k) = config.host_shape(h.kind);
            Matrix::filled(d, k, 1.0)
        })
        .collect();
    let got = group_importance(&config, &DependencyMap::for_model(&config), &ones).unwrap();
    for (g, &v) in got[0].iter().enumerate() {
        assert_eq!(v, config.group_params(g) as f64);
    }
}

#[test]
fn missing_host_scores_are_a_partition_error() {
    let config = small_config();
    let mut rng = RngStream::new(3, 0);
    let mut scores = random_scores(&config, &mut rng);
    scores.pop();
    let err = group_importance(&config, &DependencyMap::for_model(&config), &scores).unwrap_err();
    assert!(matches!(err, Error::Partition(_)));
}

#[test]
fn moving_average_closed_form_and_limits() {
    for &eta in &[0.0, 0.5, 0.9, 0.99] {
        for k in [1, 5, 20] {
            let mut theta = vec![vec![0.0, 0.0]];
            for _ in 0..k {
                update_moving_average(&mut theta, &[vec![3.0, -1.5]], eta).unwrap();
            }
            let f = 1.0 - f64::powi(eta, k);
            assert!((theta[0][0] - 3.0 * f).abs() < 1e-12);
            assert!((theta[0][1] + 1.5 * f).abs() < 1e-12);
        }
    }
    let mut theta = vec![vec![2.0]];
    update_moving_average(&mut theta, &[vec![7.0]], 1.0).unwrap();
    assert_eq!(theta[0][0], 2.0);
    assert!(update_moving_average(&mut theta, &[vec![7.0]], 1.5).is_err());
}

/// Config with 2 heads and 6 channels: 8 groups, two size classes.
fn eight_groups() -> ModelConfig {
    small_config()
}

/// Smallest removable count ≥ `need` and its cheapest cost, over all subsets of kept groups.
fn exhaustive(config: &ModelConfig, theta: &[f64], masks: &MaskSet, need: usize) -> Option<(usize, f64)> {
    let kept: Vec<usize> = (0..theta.len()).filter(|&g| masks.is_kept(GroupId::new(0, g))).collect();
    let mut best: Option<(usize, f64)> = None;
    for bits in 0u32..(1 << kept.len()) {
        let chosen = kept.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, &g)| g);
        let (size, cost) = chosen.fold((0, 0.0), |(s, c), g| (s + config.group_params(g), c + theta[g]));
        if size < need {
            continue;
        }
        let better = match best {
            None => true,
            Some((s, c)) => size < s || (size == s && cost < c - 1e-12),
        };
        if better {
            best = Some((size, cost));
        }
    }
    best
}

#[test]
fn lowest_scores_go_first_within_a_class() {
    let config = eight_groups();
    let mut state = GroupImportanceState::new(&config, 0.9).unwrap();
    state.theta[0] = vec![9.0, 9.0, 4.0, 3.0, 2.0, 1.0, 5.0, 6.0];
    let masks = MaskSet::full(&config);
    let per = config.channel_group_params() as f64 / config.prunable_params() as f64;
    let d = select_and_mask(&config, &state, &masks, 2.0 * per).unwrap();
    assert_eq!(d.clear, [GroupId::new(0, 4), GroupId::new(0, 5)]);
}

#[test]
fn ties_break_by_group_index() {
    let config = eight_groups();
    let state = GroupImportanceState::new(&config, 0.9).unwrap();
    let masks = MaskSet::full(&config);
    let per = config.channel_group_params() as f64 / config.prunable_params() as f64;
    let d = select_and_mask(&config, &state, &masks, 3.0 * per).unwrap();
    assert_eq!(d.clear, [GroupId::new(0, 2), GroupId::new(0, 3), GroupId::new(0, 4)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn selection_is_the_exhaustive_optimum(seed in any::<u64>(), target in 0.0f64..=1.0, pre in 0u32..256) {
        let config = eight_groups();
        let mut rng = RngStream::new(seed, 0);
        let mut state = GroupImportanceState::new(&config, 0.9).unwrap();
        for v in &mut state.theta[0] {
            *v = (rng.uniform() * 8.0).floor();
        }
        let mut masks = MaskSet::full(&config);
        let pre_clear: Vec<GroupId> = (0..8).filter(|g| pre >> g & 1 == 1 && *g != 0).map(|g| GroupId::new(0, g)).collect();
        apply_masks(&mut masks, &pre_clear).unwrap();
        let before = masks.clone();
        let d = select_and_mask(&config, &state, &masks, target).unwrap();
        apply_masks(&mut masks, &d.clear).unwrap();
        for (g, kept) in before.iter_groups() {
            prop_assert!(kept || !masks.is_kept(g));
        }
        prop_assert!(masks.pruned_ratio(&config) >= target - 1e-12);
        let already = config.prunable_params() - before.retained_params(&config);
        let need = required_pruned(&config, target);
        if already >= need {
            prop_assert!(d.clear.is_empty());
        } else {
            let (size, cost) = exhaustive(&config, &state.theta[0], &before, need - already).unwrap();
            let got_size: usize = d.clear.iter().map(|g| config.group_params(g.group)).sum();
            let got_cost: f64 = d.clear.iter().map(|&g| state.score(g)).sum();
            prop_assert_eq!(got_size, size);
            prop_assert!((got_cost - cost).abs() < 1e-9);
        }
    }

    #[test]
    fn ratio_is_monotone_over_rising_targets(seed in any::<u64>()) {
        let config = ModelConfig::default();
        let mut rng = RngStream::new(seed, 0);
        let mut state = GroupImportanceState::new(&config, 0.9).unwrap();
        let mut masks = MaskSet::full(&config);
        let mut last = 0.0;
        for step in 1..=8 {
            for v in &mut state.theta[0] {
                *v = rng.uniform();
            }
            let target = step as f64 * 0.1;
            let d = select_and_mask(&config, &state, &masks, target).unwrap();
            apply_masks(&mut masks, &d.clear).unwrap();
            let ratio = masks.pruned_ratio(&config);
            prop_assert!(ratio >= target - 1e-12);
            prop_assert!(ratio >= last);
            last = ratio;
        }
    }

    #[test]
    fn masked_groups_keep_their_score(seed in any::<u64>(), steps in 1usize..10) {
        let config = eight_groups();
        let mut rng = RngStream::new(seed, 0);
        let mut state = GroupImportanceState::new(&config, 0.8).unwrap();
        let first: Vec<Vec<f64>> = vec![(0..8).map(|_| rng.uniform()).collect()];
        state.update(&first, &MaskSet::full(&config)).unwrap();
        let mut masks = MaskSet::full(&config);
        apply_masks(&mut masks, &[GroupId::new(0, 1), GroupId::new(0, 5)]).unwrap();
        let frozen = (state.theta[0][1], state.theta[0][5]);
        for _ in 0..steps {
            let next: Vec<Vec<f64>> = vec![(0..8).map(|_| rng.uniform() * 10.0).collect()];
            state.update(&next, &masks).unwrap();
        }
        prop_assert_eq!((state.theta[0][1], state.theta[0][5]), frozen);
    }
}
