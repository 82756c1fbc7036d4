//! Tiny frozen transformer classifier with prunable head/channel groups.
//!
//! Weights use the `input × output` convention: a linear layer computes
//! `y = x · W` for row-vector activations. One pre-norm encoder block is
//!
//! ```text
//! x1 = x  + Attn(LN1(x)) · W_out
//! x2 = x1 + gelu(LN2(x1) · W_ffn1) · W_ffn2
//! ```
//!
//! and the classifier reads the sequence mean of the final residual stream.
//! Head `h` owns columns `h·d_h..(h+1)·d_h` of query/key/value and the same
//! rows of out; FFN channel `c` owns column `c` of ffn1 and row `c` of ffn2.

mod checkpoint;
mod cost;
mod net;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraModule;
use crate::numkit::{gaussian_fill, Matrix, RngStream};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cost::{lora_wire_bytes, step_macs};
pub use net::{evaluate, forward, loss_and_grads, Batch, ForwardCache, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_channels: usize,
    pub num_blocks: usize,
    pub seq_len: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            num_heads: 4,
            head_dim: 8,
            ffn_channels: 64,
            num_blocks: 1,
            seq_len: 8,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_channels", self.ffn_channels),
            ("num_blocks", self.num_blocks),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
        ];
        for (key, v) in fields {
            if v == 0 {
                return Err(Error::Validation {
                    key: key.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        if self.d_model != self.num_heads * self.head_dim {
            return Err(Error::Validation {
                key: "d_model".into(),
                msg: format!(
                    "{} != num_heads {} * head_dim {}",
                    self.d_model, self.num_heads, self.head_dim
                ),
            });
        }
        if self.num_classes < 2 {
            return Err(Error::Validation {
                key: "num_classes".into(),
                msg: "need at least 2 classes".into(),
            });
        }
        Ok(())
    }

    /// Prunable groups per block: heads first, then FFN channels.
    pub fn groups_per_block(&self) -> usize {
        self.num_heads + self.ffn_channels
    }

    pub fn head_group_params(&self) -> usize {
        4 * self.d_model * self.head_dim
    }

    pub fn channel_group_params(&self) -> usize {
        2 * self.d_model
    }

    pub fn group_params(&self, group: usize) -> usize {
        if group < self.num_heads {
            self.head_group_params()
        } else {
            self.channel_group_params()
        }
    }

    /// Parameters in all prunable groups of the model.
    pub fn prunable_params(&self) -> usize {
        self.num_blocks
            * (self.num_heads * self.head_group_params()
                + self.ffn_channels * self.channel_group_params())
    }

    pub fn host_shape(&self, kind: LayerKind) -> (usize, usize) {
        let d = self.d_model;
        match kind {
            LayerKind::Query | LayerKind::Key | LayerKind::Value | LayerKind::Out => (d, d),
            LayerKind::Ffn1 => (d, self.ffn_channels),
            LayerKind::Ffn2 => (self.ffn_channels, d),
        }
    }

    /// Every host weight in canonical order (block-major, then [`LayerKind::ALL`]).
    pub fn hosts(&self) -> Vec<HostId> {
        (0..self.num_blocks)
            .flat_map(|b| LayerKind::ALL.iter().map(move |&k| HostId::new(b, k)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Query,
    Key,
    Value,
    Out,
    Ffn1,
    Ffn2,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Query,
        LayerKind::Key,
        LayerKind::Value,
        LayerKind::Out,
        LayerKind::Ffn1,
        LayerKind::Ffn2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Query => "query",
            LayerKind::Key => "key",
            LayerKind::Value => "value",
            LayerKind::Out => "out",
            LayerKind::Ffn1 => "ffn1",
            LayerKind::Ffn2 => "ffn2",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        LayerKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_attention(self) -> bool {
        self.index() < 4
    }

    /// Whether this layer's group slices are columns (otherwise rows).
    pub fn groups_by_column(self) -> bool {
        !matches!(self, LayerKind::Out | LayerKind::Ffn2)
    }
}

/// Identifies one frozen weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HostId {
    pub block: usize,
    pub kind: LayerKind,
}

impl HostId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        HostId { block, kind }
    }

    /// Position in [`ModelConfig::hosts`].
    pub fn slot(&self) -> usize {
        self.block * LayerKind::ALL.len() + self.kind.index()
    }
}

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind.name())
    }
}

/// `(layer, group)`; groups `0..H` are heads, `H..H+F` are FFN channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub layer: usize,
    pub group: usize,
}

impl GroupId {
    pub fn new(layer: usize, group: usize) -> Self {
        GroupId { layer, group }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBlock {
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    /// Indexed by [`LayerKind::index`].
    pub weights: [Matrix; 6],
}

impl FrozenBlock {
    pub fn weight(&self, kind: LayerKind) -> &Matrix {
        &self.weights[kind.index()]
    }
}

/// The frozen backbone. Never mutated after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    config: ModelConfig,
    blocks: Vec<FrozenBlock>,
}

impl FrozenModel {
    /// Random backbone with `N(0, 1/fan_in)` weights and identity LayerNorms.
    pub fn random(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.num_blocks)
            .map(|_| {
                let weights = LayerKind::ALL.map(|kind| {
                    let (d, k) = config.host_shape(kind);
                    gaussian_fill(rng, d, k, 1.0 / (d as f64).sqrt())
                });
                FrozenBlock {
                    ln1: LayerNormParams::identity(config.d_model),
                    ln2: LayerNormParams::identity(config.d_model),
                    weights,
                }
            })
            .collect();
        Ok(FrozenModel { config, blocks })
    }

    pub fn from_blocks(config: ModelConfig, blocks: Vec<FrozenBlock>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.num_blocks {
            return Err(Error::config(format!(
                "expected {} blocks, got {}",
                config.num_blocks,
                blocks.len()
            )));
        }
        for (b, block) in blocks.iter().enumerate() {
            for kind in LayerKind::ALL {
                if block.weight(kind).shape() != config.host_shape(kind) {
                    return Err(Error::config(format!(
                        "{} has shape {:?}, expected {:?}",
                        HostId::new(b, kind),
                        block.weight(kind).shape(),
                        config.host_shape(kind)
                    )));
                }
            }
            for ln in [&block.ln1, &block.ln2] {
                if ln.gamma.len() != config.d_model || ln.beta.len() != config.d_model {
                    return Err(Error::config(format!("block{b} layernorm width mismatch")));
                }
            }
        }
        Ok(FrozenModel { config, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[FrozenBlock] {
        &self.blocks
    }

    pub fn weight(&self, host: HostId) -> &Matrix {
        self.blocks[host.block].weight(host.kind)
    }

    /// Copy with one weight replaced; used by ablation and mask-soundness checks.
    pub fn with_weight(&self, host: HostId, w: Matrix) -> Result<Self> {
        if w.shape() != self.weight(host).shape() {
            return Err(Error::Shape {
                op: "with_weight",
                left: self.weight(host).shape(),
                right: w.shape(),
            });
        }
        let mut out = self.clone();
        out.blocks[host.block].weights[host.kind.index()] = w;
        Ok(out)
    }
}

/// Per-block keep/prune bits for every dependency group. `true` means kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    num_heads: usize,
    keep: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn full(config: &ModelConfig) -> Self {
        MaskSet {
            num_heads: config.num_heads,
            keep: vec![vec![true; config.groups_per_block()]; config.num_blocks],
        }
    }

    pub fn from_bits(config: &ModelConfig, keep: Vec<Vec<bool>>) -> Result<Self> {
        if keep.len() != config.num_blocks
            || keep.iter().any(|k| k.len() != config.groups_per_block())
        {
            return Err(Error::config("mask bit-vector does not match group counts"));
        }
        Ok(MaskSet {
            num_heads: config.num_heads,
            keep,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.keep.len()
    }

    pub fn groups_per_layer(&self) -> usize {
        self.keep.first().map_or(0, Vec::len)
    }

    pub fn bits(&self, layer: usize) -> &[bool] {
        &self.keep[layer]
    }

    pub fn is_kept(&self, g: GroupId) -> bool {
        self.keep[g.layer][g.group]
    }

    pub fn head_kept(&self, layer: usize, head: usize) -> bool {
        self.keep[layer][head]
    }

    pub fn channel_kept(&self, layer: usize, channel: usize) -> bool {
        self.keep[layer][self.num_heads + channel]
    }

    pub fn active_heads(&self, layer: usize) -> usize {
        self.keep[layer][..self.num_heads].iter().filter(|&&k| k).count()
    }

    pub fn active_channels(&self, layer: usize) -> usize {
        self.keep[layer][self.num_heads..].iter().filter(|&&k| k).count()
    }

    pub fn pruned_groups(&self) -> Vec<GroupId> {
        self.iter_groups().filter(|(_, kept)| !kept).map(|(g, _)| g).collect()
    }

    pub fn iter_groups(&self) -> impl Iterator<Item = (GroupId, bool)> + '_ {
        self.keep.iter().enumerate().flat_map(|(l, bits)| {
            bits.iter().enumerate().map(move |(g, &k)| (GroupId::new(l, g), k))
        })
    }

    /// Parameters in kept prunable groups (`size(W^t)`).
    pub fn retained_params(&self, config: &ModelConfig) -> usize {
        self.iter_groups()
            .filter(|(_, kept)| *kept)
            .map(|(g, _)| config.group_params(g.group))
            .sum()
    }

    /// `1 - size(W^t) / size(W^0)` over prunable group parameters.
    pub fn pruned_ratio(&self, config: &ModelConfig) -> f64 {
        1.0 - self.retained_params(config) as f64 / config.prunable_params() as f64
    }

    /// Column (or row) multiplier for `kind` in `layer`: 1.0 kept, 0.0 pruned.
    pub fn host_mask(&self, config: &ModelConfig, host: HostId) -> Vec<f64> {
        let l = host.block;
        match host.kind {
            LayerKind::Query | LayerKind::Key | LayerKind::Value | LayerKind::Out => (0
                ..config.d_model)
                .map(|i| f64::from(u8::from(self.head_kept(l, i / config.head_dim))))
                .collect(),
            LayerKind::Ffn1 | LayerKind::Ffn2 => (0..config.ffn_channels)
                .map(|c| f64::from(u8::from(self.channel_kept(l, c))))
                .collect(),
        }
    }
}

/// Clears the listed groups. Fails if any is already pruned, leaving `masks` untouched.
pub fn apply_masks(masks: &mut MaskSet, update: &[GroupId]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for g in update {
        if g.layer >= masks.num_layers() || g.group >= masks.groups_per_layer() {
            return Err(Error::arg(format!("group {g:?} out of range")));
        }
        if !masks.is_kept(*g) || !seen.insert(*g) {
            return Err(Error::Monotonicity {
                layer: g.layer,
                group: g.group,
            });
        }
    }
    for g in update {
        masks.keep[g.layer][g.group] = false;
    }
    Ok(())
}

/// Trainable classifier head over the mean-pooled residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(config: &ModelConfig) -> Self {
        ClassifierHead {
            weight: Matrix::zeros(config.d_model, config.num_classes),
            bias: vec![0.0; config.num_classes],
        }
    }

    pub fn random(config: &ModelConfig, sigma: f64, rng: &mut RngStream) -> Self {
        ClassifierHead {
            weight: gaussian_fill(rng, config.d_model, config.num_classes, sigma),
            bias: vec![0.0; config.num_classes],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Everything a device trains: one LoRA module per host weight plus the head.
///
/// `loras` is either empty (frozen model only) or holds one module per host in
/// [`ModelConfig::hosts`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    pub loras: Vec<LoraModule>,
    pub head: ClassifierHead,
}

impl Adapters {
    pub fn frozen_only(head: ClassifierHead) -> Self {
        Adapters {
            loras: Vec::new(),
            head,
        }
    }

    /// Fresh LoRA modules of uniform `rank`, drawn in host order from `rng`.
    pub fn init(
        config: &ModelConfig,
        rank: usize,
        alpha: f64,
        head: ClassifierHead,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let loras = config
            .hosts()
            .into_iter()
            .map(|h| LoraModule::init(h, config.host_shape(h.kind), rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Adapters { loras, head })
    }

    pub fn lora(&self, host: HostId) -> Option<&LoraModule> {
        self.loras.get(host.slot())
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.head.weight.shape() != (config.d_model, config.num_classes)
            || self.head.bias.len() != config.num_classes
        {
            return Err(Error::config("classifier head shape mismatch"));
        }
        if self.loras.is_empty() {
            return Ok(());
        }
        let hosts = config.hosts();
        if self.loras.len() != hosts.len() {
            return Err(Error::config(format!(
                "expected {} lora modules, got {}",
                hosts.len(),
                self.loras.len()
            )));
        }
        for (m, h) in self.loras.iter().zip(hosts) {
            if m.host != h || m.host_shape() != config.host_shape(h.kind) {
                return Err(Error::config(format!(
                    "lora for {} has host {} and shape {:?}, expected {:?}",
                    h,
                    m.host,
                    m.host_shape(),
                    config.host_shape(h.kind)
                )));
            }
        }
        Ok(())
    }

    pub fn trainable_params(&self) -> usize {
        self.loras.iter().map(LoraModule::num_params).sum::<usize>() + self.head.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.prunable_params(), 4 * 1024 + 64 * 64);
    }

    #[test]
    fn config_rejects_inconsistent_heads() {
        let c = ModelConfig {
            d_model: 30,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn clearing_nothing_keeps_ratio_zero() {
        let c = ModelConfig::default();
        let mut m = MaskSet::full(&c);
        apply_masks(&mut m, &[]).unwrap();
        assert_eq!(m.pruned_ratio(&c), 0.0);
    }

    #[test]
    fn clearing_all_channels_drops_ffn_params() {
        let c = ModelConfig::default();
        let mut m = MaskSet::full(&c);
        let update: Vec<_> = (c.num_heads..c.groups_per_block()).map(|g| GroupId::new(0, g)).collect();
        apply_masks(&mut m, &update).unwrap();
        assert_eq!(m.active_channels(0), 0);
        assert_eq!(m.retained_params(&c), c.num_heads * c.head_group_params());
    }

    #[test]
    fn clearing_two_heads_halves_attention_params() {
        let c = ModelConfig::default();
        let mut m = MaskSet::full(&c);
        apply_masks(&mut m, &[GroupId::new(0, 0), GroupId::new(0, 2)]).unwrap();
        // Direct count of surviving attention entries from the host masks.
        let mut count = 0;
        for kind in [LayerKind::Query, LayerKind::Key, LayerKind::Value, LayerKind::Out] {
            let mask = m.host_mask(&c, HostId::new(0, kind));
            let (d, k) = c.host_shape(kind);
            let other = if kind.groups_by_column() { d } else { k };
            count += mask.iter().filter(|&&v| v == 1.0).count() * other;
        }
        assert_eq!(count, 4 * 32 * 32 / 2);
    }

    #[test]
    fn masks_are_monotone() {
        let c = ModelConfig::default();
        let mut m = MaskSet::full(&c);
        apply_masks(&mut m, &[GroupId::new(0, 1)]).unwrap();
        let err = apply_masks(&mut m, &[GroupId::new(0, 3), GroupId::new(0, 1)]).unwrap_err();
        assert!(matches!(err, Error::Monotonicity { layer: 0, group: 1 }));
        assert!(m.is_kept(GroupId::new(0, 3)), "failed update must not partially apply");
        assert!(apply_masks(&mut m, &[GroupId::new(0, 5), GroupId::new(0, 5)]).is_err());
    }

    #[test]
    fn host_order_and_slots_agree() {
        let c = ModelConfig {
            num_blocks: 2,
            ..ModelConfig::default()
        };
        for (i, h) in c.hosts().iter().enumerate() {
            assert_eq!(h.slot(), i);
        }
    }
}
