mod common;

use common::{finite_difference_check, random_adapters, random_batch, small_config};
use fedspine::lora::LoraModule;
use fedspine::model::{
    apply_masks, forward, loss_and_grads, step_macs, Adapters, Batch, ClassifierHead, FrozenBlock,
    FrozenModel, GroupId, HostId, LayerKind, LayerNormParams, MaskSet, ModelConfig,
};
use fedspine::numkit::{gaussian_fill, Matrix, RngStream};
use fedspine::Error;

fn golden_config() -> ModelConfig {
    ModelConfig {
        d_model: 2,
        num_heads: 1,
        head_dim: 2,
        ffn_channels: 2,
        num_blocks: 1,
        seq_len: 2,
        num_classes: 2,
    }
}

fn golden_model() -> (FrozenModel, Adapters, Batch) {
    let config = golden_config();
    let m = |rows: &[&[f64]]| Matrix::from_rows(rows);
    let block = FrozenBlock {
        ln1: LayerNormParams::identity(2),
        ln2: LayerNormParams::identity(2),
        weights: [
            m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            m(&[&[1.0, 1.0], &[0.0, 1.0]]),
            m(&[&[2.0, 0.0], &[1.0, 1.0]]),
            m(&[&[1.0, 0.0], &[0.0, -1.0]]),
            m(&[&[1.0, -1.0], &[2.0, 0.0]]),
            m(&[&[1.0, 0.0], &[0.0, 1.0]]),
        ],
    };
    let model = FrozenModel::from_blocks(config, vec![block]).unwrap();
    let head = ClassifierHead {
        weight: m(&[&[1.0, -1.0], &[0.0, 1.0]]),
        bias: vec![0.0, 0.5],
    };
    let batch = Batch::new(m(&[&[1.0, 2.0], &[3.0, 0.0]]), vec![0], &config).unwrap();
    (model, Adapters::frozen_only(head), batch)
}

#[test]
fn hand_built_forward_matches_golden_logits() {
    // Worked by hand: LayerNorm sends every 2-vector to (±1, ∓1), attention
    // mixes the two value rows, GELU (tanh form) acts on the ffn1 outputs.
    let golden = [2.341_193_912_920_435_3, -0.499_999_999_999_999_56];
    let (model, adapters, batch) = golden_model();
    let masks = MaskSet::full(model.config());
    let logits = forward(&model, &adapters, &masks, &batch).unwrap().logits;
    for (got, want) in logits.row(0).iter().zip(golden) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn hand_counted_macs_for_golden_model() {
    // Per example, rank 1, S=2, D=2, one head of width 2, F=2:
    //   frozen: q,k,v 3·S·D·2 = 24, out S·2·D = 8, ffn 2·S·D·F = 16      -> 48
    //   lora:   q,k,v 3·(S·D·1 + S·1·2) = 24, out 8, ffn1 8, ffn2 8        -> 48
    //   attention scores + mix: 2·S·S·2 = 16; classifier D·C = 4
    //   step = 2·48 + 3·(48 + 16 + 4) = 300
    let config = golden_config();
    let masks = MaskSet::full(&config);
    assert_eq!(step_macs(&config, &masks, 1, 1), 300);
    assert_eq!(step_macs(&config, &masks, 1, 5), 1500);
    // Prune one ffn channel: frozen ffn 8, lora ffn1 4+2, ffn2 2+4.
    let mut pruned = masks.clone();
    apply_masks(&mut pruned, &[GroupId::new(0, 1)]).unwrap();
    assert_eq!(step_macs(&config, &pruned, 1, 1), 2 * 40 + 3 * (44 + 16 + 4));
}

#[test]
fn finite_differences_match_analytic_gradients() {
    let configs = [
        small_config(),
        ModelConfig {
            d_model: 6,
            num_heads: 3,
            head_dim: 2,
            ffn_channels: 5,
            num_blocks: 2,
            seq_len: 4,
            num_classes: 2,
        },
        ModelConfig {
            d_model: 4,
            num_heads: 1,
            head_dim: 4,
            ffn_channels: 8,
            num_blocks: 1,
            seq_len: 2,
            num_classes: 4,
        },
    ];
    for (i, config) in configs.iter().enumerate() {
        let mut rng = RngStream::new(100 + i as u64, 0);
        let model = FrozenModel::random(*config, &mut rng).unwrap();
        let adapters = random_adapters(config, 2, &mut rng);
        let batch = random_batch(config, 3, &mut rng);
        let mut masks = MaskSet::full(config);
        // one pruned channel so masked gradients are exercised too
        apply_masks(&mut masks, &[GroupId::new(0, config.num_heads)]).unwrap();
        let report = finite_difference_check(&model, &adapters, &masks, &batch, 1e-5);
        assert!(report.checked > 0);
        assert!(report.max_rel_err < 1e-4, "config {i}: {report:?}");
    }
}

#[test]
fn zero_b_reproduces_frozen_logits_bitwise() {
    let config = small_config();
    let mut rng = RngStream::new(3, 0);
    let model = FrozenModel::random(config, &mut rng).unwrap();
    let head = ClassifierHead::random(&config, 0.3, &mut rng);
    let adapters = Adapters::init(&config, 4, 16.0, head.clone(), &mut rng).unwrap();
    let batch = random_batch(&config, 4, &mut rng);
    let masks = MaskSet::full(&config);
    let with = forward(&model, &adapters, &masks, &batch).unwrap().logits;
    let without = forward(&model, &Adapters::frozen_only(head), &masks, &batch).unwrap().logits;
    assert_eq!(with, without);
}

#[test]
fn fully_masked_model_reduces_to_head_on_pooled_inputs() {
    let config = small_config();
    let mut rng = RngStream::new(4, 0);
    let model = FrozenModel::random(config, &mut rng).unwrap();
    let adapters = random_adapters(&config, 2, &mut rng);
    let batch = random_batch(&config, 3, &mut rng);
    let mut masks = MaskSet::full(&config);
    let all: Vec<_> = (0..config.groups_per_block()).map(|g| GroupId::new(0, g)).collect();
    apply_masks(&mut masks, &all).unwrap();
    let logits = forward(&model, &adapters, &masks, &batch).unwrap().logits;
    for e in 0..batch.len() {
        for c in 0..config.num_classes {
            let mut want = adapters.head.bias[c];
            for d in 0..config.d_model {
                let pooled: f64 = (0..config.seq_len)
                    .map(|s| batch.inputs[(e * config.seq_len + s, d)])
                    .sum::<f64>()
                    / config.seq_len as f64;
                want += pooled * adapters.head.weight[(d, c)];
            }
            assert!((logits[(e, c)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_head_gives_log_c_loss() {
    let config = small_config();
    let mut rng = RngStream::new(5, 0);
    let model = FrozenModel::random(config, &mut rng).unwrap();
    let adapters = Adapters::frozen_only(ClassifierHead::zeros(&config));
    let batch = random_batch(&config, 5, &mut rng);
    let (loss, _) = loss_and_grads(&model, &adapters, &MaskSet::full(&config), &batch).unwrap();
    assert!((loss - (config.num_classes as f64).ln()).abs() < 1e-12);
}

#[test]
fn duplicated_batch_leaves_loss_and_grads_unchanged() {
    let config = small_config();
    let mut rng = RngStream::new(6, 0);
    let model = FrozenModel::random(config, &mut rng).unwrap();
    let adapters = random_adapters(&config, 3, &mut rng);
    let batch = random_batch(&config, 4, &mut rng);
    let masks = MaskSet::full(&config);
    let (l1, g1) = loss_and_grads(&model, &adapters, &masks, &batch).unwrap();
    let (l2, g2) = loss_and_grads(&model, &adapters, &masks, &batch.repeated(2, config.seq_len)).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for ((b1, a1), (b2, a2)) in g1.lora.iter().zip(&g2.lora) {
        assert!(b1.sub(b2).unwrap().max_abs() < 1e-12);
        assert!(a1.sub(a2).unwrap().max_abs() < 1e-12);
    }
    assert!(g1.head_weight.sub(&g2.head_weight).unwrap().max_abs() < 1e-12);
}

/// Overwrites every frozen entry belonging to `group` in block `layer`.
fn scramble_group(model: &FrozenModel, layer: usize, group: usize, rng: &mut RngStream) -> FrozenModel {
    let config = *model.config();
    let mut out = model.clone();
    for kind in LayerKind::ALL {
        let host = HostId::new(layer, kind);
        let (lo, hi) = match (kind.is_attention(), group < config.num_heads) {
            (true, true) => (group * config.head_dim, (group + 1) * config.head_dim),
            (false, false) => (group - config.num_heads, group - config.num_heads + 1),
            _ => continue,
        };
        let mut w = out.weight(host).clone();
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let idx = if kind.groups_by_column() { j } else { i };
                if (lo..hi).contains(&idx) {
                    w.row_mut(i)[j] = 100.0 * rng.normal();
                }
            }
        }
        out = out.with_weight(host, w).unwrap();
    }
    out
}

#[test]
fn masked_groups_do_not_influence_logits() {
    let config = ModelConfig {
        num_blocks: 2,
        ..small_config()
    };
    let mut rng = RngStream::new(7, 0);
    let model = FrozenModel::random(config, &mut rng).unwrap();
    let adapters = random_adapters(&config, 2, &mut rng);
    let batch = random_batch(&config, 3, &mut rng);
    for (layer, group) in [(0, 0), (1, 1), (0, config.num_heads + 2), (1, config.num_heads)] {
        let mut masks = MaskSet::full(&config);
        apply_masks(&mut masks, &[GroupId::new(layer, group)]).unwrap();
        let base = forward(&model, &adapters, &masks, &batch).unwrap().logits;
        let scrambled = scramble_group(&model, layer, group, &mut rng);
        let after = forward(&scrambled, &adapters, &masks, &batch).unwrap().logits;
        assert_eq!(base, after, "group ({layer}, {group})");
        // and unmasked, the scramble is visible
        let full = MaskSet::full(&config);
        assert_ne!(
            forward(&model, &adapters, &full, &batch).unwrap().logits,
            forward(&scrambled, &adapters, &full, &batch).unwrap().logits
        );
    }
}

#[test]
fn empty_batch_is_an_argument_error() {
    let config = small_config();
    let mut rng = RngStream::new(8, 0);
    let model = FrozenModel::random(config, &mut rng).unwrap();
    let batch = Batch::new(Matrix::zeros(0, config.d_model), vec![], &config).unwrap();
    let adapters = Adapters::frozen_only(ClassifierHead::zeros(&config));
    let err = loss_and_grads(&model, &adapters, &MaskSet::full(&config), &batch).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
}

#[test]
fn mismatched_lora_is_a_configuration_error() {
    let config = small_config();
    let mut rng = RngStream::new(9, 0);
    let model = FrozenModel::random(config, &mut rng).unwrap();
    let mut adapters = random_adapters(&config, 2, &mut rng);
    let host = adapters.loras[0].host;
    adapters.loras[0] = LoraModule::from_factors(
        host,
        gaussian_fill(&mut rng, 3, 2, 1.0),
        gaussian_fill(&mut rng, 2, 3, 1.0),
        16.0,
    )
    .unwrap();
    let batch = random_batch(&config, 2, &mut rng);
    let err = forward(&model, &adapters, &MaskSet::full(&config), &batch).err().unwrap();
    assert!(matches!(err, Error::Configuration(_)));
}

#[test]
fn two_of_four_heads_halves_attention_params() {
    let config = ModelConfig::default();
    let mut masks = MaskSet::full(&config);
    let attention = |m: &MaskSet| m.active_heads(0) * config.head_group_params();
    let before = attention(&masks);
    apply_masks(&mut masks, &[GroupId::new(0, 1), GroupId::new(0, 3)]).unwrap();
    // direct count over the four attention weights
    let direct: usize = (0..config.num_heads)
        .filter(|&h| masks.head_kept(0, h))
        .map(|_| 4 * config.d_model * config.head_dim)
        .sum();
    assert_eq!(attention(&masks), before / 2);
    assert_eq!(direct, before / 2);
}
