//! Server-side aggregation of device uploads.

use crate::error::{Error, Result};
use crate::lora::LoraModule;
use crate::model::{Adapters, ClassifierHead, ModelConfig};
use crate::numkit::{Matrix, RngStream};

/// Mean idle time behind the slowest device: `mean_i(max_j T_j − T_i)`.
pub fn waiting_time(times: &[f64]) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    times.iter().map(|t| max - t).sum::<f64>() / times.len() as f64
}

/// `c_i = I_i / Σ I`, or uniform when the importances sum to zero.
pub fn aggregation_weights(importances: &[f64]) -> Vec<f64> {
    let total: f64 = importances.iter().sum();
    let n = importances.len() as f64;
    if total > 0.0 && total.is_finite() {
        importances.iter().map(|i| i / total).collect()
    } else {
        vec![1.0 / n; importances.len()]
    }
}

/// `Σ_i c_i · ΔW_i` for each host, summed in device order.
pub fn aggregate_products(uploads: &[&Adapters], weights: &[f64]) -> Result<Vec<Matrix>> {
    check_uploads(uploads, weights)?;
    let mut out: Vec<Matrix> = uploads[0]
        .loras
        .iter()
        .map(|m| {
            let (d, k) = m.host_shape();
            Matrix::zeros(d, k)
        })
        .collect();
    for (up, &c) in uploads.iter().zip(weights) {
        if up.loras.len() != out.len() {
            return Err(Error::config("uploads carry different module counts"));
        }
        for (acc, m) in out.iter_mut().zip(&up.loras) {
            acc.axpy(c, &m.delta())?;
        }
    }
    Ok(out)
}

/// `Σ_i c_i · head_i`.
pub fn aggregate_heads(uploads: &[&Adapters], weights: &[f64]) -> Result<ClassifierHead> {
    check_uploads(uploads, weights)?;
    let first = &uploads[0].head;
    let mut weight = Matrix::zeros(first.weight.rows(), first.weight.cols());
    let mut bias = vec![0.0; first.bias.len()];
    for (up, &c) in uploads.iter().zip(weights) {
        weight.axpy(c, &up.head.weight)?;
        for (b, x) in bias.iter_mut().zip(&up.head.bias) {
            *b += c * x;
        }
    }
    Ok(ClassifierHead { weight, bias })
}

/// Elementwise means of `B` and of `A` per host; every upload must share one rank.
pub fn homogeneous_average(uploads: &[&[LoraModule]]) -> Result<Vec<LoraModule>> {
    let first = uploads.first().ok_or_else(|| Error::arg("no uploads to average"))?;
    let n = uploads.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (slot, m0) in first.iter().enumerate() {
        let mut b = Matrix::zeros(m0.b().rows(), m0.b().cols());
        let mut a = Matrix::zeros(m0.a().rows(), m0.a().cols());
        for up in uploads {
            let m = up
                .get(slot)
                .ok_or_else(|| Error::config("uploads carry different module counts"))?;
            if m.rank() != m0.rank() || m.host != m0.host {
                return Err(Error::config(format!(
                    "factor averaging needs equal ranks, got {} and {} on {}",
                    m0.rank(),
                    m.rank(),
                    m0.host
                )));
            }
            b.axpy(1.0 / n, m.b())?;
            a.axpy(1.0 / n, m.a())?;
        }
        out.push(LoraModule::from_factors(m0.host, b, a, m0.alpha())?);
    }
    Ok(out)
}

fn check_uploads(uploads: &[&Adapters], weights: &[f64]) -> Result<()> {
    if uploads.is_empty() {
        return Err(Error::arg("no uploads to aggregate"));
    }
    if uploads.len() != weights.len() {
        return Err(Error::arg("one aggregation weight per upload required"));
    }
    Ok(())
}

/// Global adapter state held between rounds.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalLora {
    /// Effective update `ΔW̄` per host; devices refactor it at their own rank.
    Products(Vec<Matrix>),
    /// Shared factors at one rank; devices receive them unchanged.
    Factors(Vec<LoraModule>),
}

impl GlobalLora {
    pub fn zero_products(config: &ModelConfig) -> Self {
        GlobalLora::Products(
            config
                .hosts()
                .into_iter()
                .map(|h| {
                    let (d, k) = config.host_shape(h.kind);
                    Matrix::zeros(d, k)
                })
                .collect(),
        )
    }

    /// Effective update per host in host order.
    pub fn deltas(&self) -> Vec<Matrix> {
        match self {
            GlobalLora::Products(p) => p.clone(),
            GlobalLora::Factors(f) => f.iter().map(LoraModule::delta).collect(),
        }
    }

    /// The modules a device starts its round from.
    pub fn distribute(
        &self,
        config: &ModelConfig,
        rank: usize,
        alpha: f64,
        rng: &mut RngStream,
    ) -> Result<Vec<LoraModule>> {
        match self {
            GlobalLora::Products(p) => config
                .hosts()
                .into_iter()
                .zip(p)
                .map(|(h, delta)| LoraModule::from_delta(h, delta, rank, alpha, rng))
                .collect(),
            GlobalLora::Factors(f) => {
                if let Some(m) = f.iter().find(|m| m.rank() != rank) {
                    return Err(Error::config(format!(
                        "shared factors have rank {}, device asked for {rank}",
                        m.rank()
                    )));
                }
                Ok(f.clone())
            }
        }
    }
}
