//! Checkpoints: `tensors.fsm` holds concatenated FSM1 matrices, `manifest.txt`
//! one tab-separated line per tensor (`name`, `role`, `RxC`, `layout`) in the
//! same order, preceded by a `#` header carrying the model config.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{
    Adapters, ClassifierHead, FrozenBlock, FrozenModel, HostId, LayerKind, LayerNormParams,
    MaskSet, ModelConfig,
};
use crate::error::{Error, Result};
use crate::lora::LoraModule;
use crate::numkit::{read_matrix, write_matrix, Matrix};

pub const MANIFEST: &str = "manifest.txt";
pub const TENSORS: &str = "tensors.fsm";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FrozenModel,
    pub adapters: Adapters,
    pub masks: MaskSet,
}

struct Entry {
    name: String,
    role: &'static str,
    layout: String,
    tensor: Matrix,
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_fn(1, v.len(), |_, j| v[j])
}

fn group_layout(config: &ModelConfig, kind: LayerKind) -> String {
    let axis = if kind.groups_by_column() { "cols" } else { "rows" };
    if kind.is_attention() {
        format!("heads:{}x{}:{axis}", config.num_heads, config.head_dim)
    } else {
        format!("channels:{}:{axis}", config.ffn_channels)
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let config = ckpt.model.config();
    ckpt.adapters.validate(config)?;
    let mut entries = Vec::new();
    for (l, block) in ckpt.model.blocks().iter().enumerate() {
        for (tag, ln) in [("ln1", &block.ln1), ("ln2", &block.ln2)] {
            entries.push(Entry {
                name: format!("block{l}.{tag}.gamma"),
                role: "frozen",
                layout: "-".into(),
                tensor: row(&ln.gamma),
            });
            entries.push(Entry {
                name: format!("block{l}.{tag}.beta"),
                role: "frozen",
                layout: "-".into(),
                tensor: row(&ln.beta),
            });
        }
        for kind in LayerKind::ALL {
            entries.push(Entry {
                name: HostId::new(l, kind).to_string(),
                role: "frozen",
                layout: group_layout(config, kind),
                tensor: block.weight(kind).clone(),
            });
        }
        let bits: Vec<f64> = ckpt.masks.bits(l).iter().map(|&k| f64::from(u8::from(k))).collect();
        entries.push(Entry {
            name: format!("block{l}.mask"),
            role: "mask",
            layout: format!("heads:{},channels:{}", config.num_heads, config.ffn_channels),
            tensor: row(&bits),
        });
    }
    for m in &ckpt.adapters.loras {
        let layout = format!("host={},r={},alpha={}", m.host, m.rank(), m.alpha());
        entries.push(Entry {
            name: format!("{}.lora_b", m.host),
            role: "lora_b",
            layout: layout.clone(),
            tensor: m.b().clone(),
        });
        entries.push(Entry {
            name: format!("{}.lora_a", m.host),
            role: "lora_a",
            layout,
            tensor: m.a().clone(),
        });
    }
    entries.push(Entry {
        name: "head.weight".into(),
        role: "head",
        layout: "-".into(),
        tensor: ckpt.adapters.head.weight.clone(),
    });
    entries.push(Entry {
        name: "head.bias".into(),
        role: "head",
        layout: "-".into(),
        tensor: row(&ckpt.adapters.head.bias),
    });

    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    let mut tensors = BufWriter::new(fs::File::create(dir.join(TENSORS))?);
    writeln!(
        manifest,
        "# fedspine-checkpoint v1 d_model={} num_heads={} head_dim={} ffn_channels={} num_blocks={} seq_len={} num_classes={}",
        config.d_model,
        config.num_heads,
        config.head_dim,
        config.ffn_channels,
        config.num_blocks,
        config.seq_len,
        config.num_classes
    )?;
    for e in &entries {
        writeln!(
            manifest,
            "{}\t{}\t{}x{}\t{}",
            e.name,
            e.role,
            e.tensor.rows(),
            e.tensor.cols(),
            e.layout
        )?;
        write_matrix(&mut tensors, &e.tensor)?;
    }
    manifest.flush()?;
    tensors.flush()?;
    Ok(())
}

fn format_err(dir: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: dir.join(MANIFEST),
        msg: msg.into(),
    }
}

fn parse_header(dir: &Path, line: &str) -> Result<ModelConfig> {
    let rest = line
        .strip_prefix("# fedspine-checkpoint v1")
        .ok_or_else(|| format_err(dir, "missing checkpoint header"))?;
    let kv: HashMap<&str, usize> = rest
        .split_whitespace()
        .filter_map(|t| t.split_once('='))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k, v)))
        .collect();
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| format_err(dir, format!("header missing {k}")))
    };
    let config = ModelConfig {
        d_model: get("d_model")?,
        num_heads: get("num_heads")?,
        head_dim: get("head_dim")?,
        ffn_channels: get("ffn_channels")?,
        num_blocks: get("num_blocks")?,
        seq_len: get("seq_len")?,
        num_classes: get("num_classes")?,
    };
    config.validate()?;
    Ok(config)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = manifest.lines();
    let config = parse_header(dir, lines.next().unwrap_or_default())?;
    let mut reader = BufReader::new(fs::File::open(dir.join(TENSORS))?);
    let mut tensors: HashMap<String, (String, String, Matrix)> = HashMap::new();
    let mut order = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(format_err(dir, format!("malformed manifest line `{line}`")));
        }
        let tensor = read_matrix(&mut reader)?;
        if format!("{}x{}", tensor.rows(), tensor.cols()) != fields[2] {
            return Err(format_err(dir, format!("{} shape disagrees with tensor data", fields[0])));
        }
        order.push(fields[0].to_string());
        tensors.insert(fields[0].into(), (fields[1].into(), fields[3].into(), tensor));
    }
    type Table = HashMap<String, (String, String, Matrix)>;
    let take_from = |tensors: &mut Table, name: &str| {
        tensors
            .remove(name)
            .map(|(_, layout, t)| (layout, t))
            .ok_or_else(|| format_err(dir, format!("missing tensor {name}")))
    };

    let mut blocks = Vec::new();
    let mut keep = Vec::new();
    for l in 0..config.num_blocks {
        let mut ln = |tag: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: take_from(&mut tensors, &format!("block{l}.{tag}.gamma"))?.1.into_data(),
                beta: take_from(&mut tensors, &format!("block{l}.{tag}.beta"))?.1.into_data(),
            })
        };
        let ln1 = ln("ln1")?;
        let ln2 = ln("ln2")?;
        let mut weights = Vec::new();
        for kind in LayerKind::ALL {
            weights.push(take_from(&mut tensors, &HostId::new(l, kind).to_string())?.1);
        }
        let weights: [Matrix; 6] = weights.try_into().expect("six layer kinds");
        blocks.push(FrozenBlock { ln1, ln2, weights });
        keep.push(
            take_from(&mut tensors, &format!("block{l}.mask"))?
                .1
                .data()
                .iter()
                .map(|&v| v != 0.0)
                .collect(),
        );
    }
    let model = FrozenModel::from_blocks(config, blocks)?;
    let masks = MaskSet::from_bits(&config, keep)?;

    let mut loras = Vec::new();
    for host in config.hosts() {
        let b_name = format!("{host}.lora_b");
        if !tensors.contains_key(&b_name) {
            continue;
        }
        let (layout, b) = take_from(&mut tensors, &b_name)?;
        let (_, a) = take_from(&mut tensors, &format!("{host}.lora_a"))?;
        let alpha = layout
            .split(',')
            .find_map(|kv| kv.strip_prefix("alpha="))
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| format_err(dir, format!("{b_name} has no alpha")))?;
        loras.push(LoraModule::from_factors(host, b, a, alpha)?);
    }
    let head = ClassifierHead {
        weight: take_from(&mut tensors, "head.weight")?.1,
        bias: take_from(&mut tensors, "head.bias")?.1.into_data(),
    };
    if let Some(extra) = order.iter().find(|n| tensors.contains_key(*n)) {
        return Err(format_err(dir, format!("unexpected tensor {extra}")));
    }
    let adapters = Adapters { loras, head };
    adapters.validate(&config)?;
    Ok(Checkpoint {
        model,
        adapters,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{apply_masks, GroupId};
    use crate::numkit::RngStream;

    #[test]
    fn save_then_load() {
        let config = ModelConfig {
            d_model: 8,
            num_heads: 2,
            head_dim: 4,
            ffn_channels: 6,
            num_blocks: 2,
            seq_len: 3,
            num_classes: 3,
        };
        let mut rng = RngStream::new(1, 0);
        let model = FrozenModel::random(config, &mut rng).unwrap();
        let head = ClassifierHead::random(&config, 0.1, &mut rng);
        let adapters = Adapters::init(&config, 2, 16.0, head, &mut rng).unwrap();
        let mut masks = MaskSet::full(&config);
        apply_masks(&mut masks, &[GroupId::new(1, 0), GroupId::new(0, 4)]).unwrap();
        let ckpt = Checkpoint {
            model,
            adapters,
            masks,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("block0.query\tfrozen\t8x8\theads:2x4:cols"));
        assert!(manifest.contains("block1.ffn2.lora_a\tlora_a\t2x8\thost=block1.ffn2,r=2,alpha=16"));
        assert_eq!(load_checkpoint(dir.path()).unwrap(), ckpt);
    }
}
