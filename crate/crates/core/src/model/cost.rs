//! Analytic multiply-accumulate counts for one training step.
//!
//! Counts a LoRA-style execution over the structurally pruned shapes: each
//! adapted linear layer computes `x·W0` plus `(x·B)·A`, and pruned heads or
//! channels shrink the corresponding dimension. The backward pass costs one
//! extra pass for frozen linears (input gradient only) and two extra passes
//! for LoRA products, attention and the classifier head (input and parameter
//! gradients). LayerNorm, softmax and activations are not MACs.

use super::{MaskSet, ModelConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Macs {
    frozen: u64,
    lora: u64,
    attention: u64,
    head: u64,
}

fn example_forward(config: &ModelConfig, masks: &MaskSet, rank: usize) -> Macs {
    let s = config.seq_len as u64;
    let d = config.d_model as u64;
    let dh = config.head_dim as u64;
    let r = rank as u64;
    let mut m = Macs::default();
    for l in 0..config.num_blocks {
        let ha = masks.active_heads(l) as u64;
        let ca = masks.active_channels(l) as u64;
        let a = ha * dh;
        // query, key, value
        m.frozen += 3 * s * d * a;
        m.lora += 3 * (s * d * r + s * r * a);
        // scores and weighted sum
        m.attention += 2 * ha * s * s * dh;
        // out
        m.frozen += s * a * d;
        m.lora += s * a * r + s * r * d;
        // ffn1, ffn2
        m.frozen += 2 * s * d * ca;
        m.lora += (s * d * r + s * r * ca) + (s * ca * r + s * r * d);
    }
    m.head = d * config.num_classes as u64;
    m
}

/// MACs of one forward+backward step over `batch_size` examples.
pub fn step_macs(config: &ModelConfig, masks: &MaskSet, rank: usize, batch_size: usize) -> u64 {
    let f = example_forward(config, masks, rank);
    let per_example = 2 * f.frozen + 3 * (f.lora + f.attention + f.head);
    per_example * batch_size as u64
}

/// Bytes of one device's adapters (all LoRA modules at `rank` plus the head) as f64.
pub fn lora_wire_bytes(config: &ModelConfig, rank: usize) -> u64 {
    let lora: usize = config
        .hosts()
        .iter()
        .map(|h| {
            let (d, k) = config.host_shape(h.kind);
            rank * (d + k)
        })
        .sum();
    let head = config.d_model * config.num_classes + config.num_classes;
    8 * (lora + head) as u64
}
