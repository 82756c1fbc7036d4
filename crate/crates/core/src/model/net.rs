use super::{Adapters, FrozenModel, HostId, LayerKind, LayerNormParams, MaskSet, ModelConfig};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Examples stacked as `(batch·seq_len) × d_model`; example `e` owns rows
/// `e·seq_len..(e+1)·seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, config: &ModelConfig) -> Result<Self> {
        if inputs.cols() != config.d_model || inputs.rows() != labels.len() * config.seq_len {
            return Err(Error::Shape {
                op: "batch",
                left: inputs.shape(),
                right: (labels.len() * config.seq_len, config.d_model),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= config.num_classes) {
            return Err(Error::arg(format!(
                "label {bad} outside [0, {})",
                config.num_classes
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The batch with every example repeated `times` times (in place order).
    pub fn repeated(&self, times: usize, seq_len: usize) -> Batch {
        let mut inputs = Matrix::zeros(self.inputs.rows() * times, self.inputs.cols());
        let mut labels = Vec::with_capacity(self.len() * times);
        let mut row = 0;
        for (e, &y) in self.labels.iter().enumerate() {
            for _ in 0..times {
                for s in 0..seq_len {
                    inputs.row_mut(row).copy_from_slice(self.inputs.row(e * seq_len + s));
                    row += 1;
                }
                labels.push(y);
            }
        }
        Batch { inputs, labels }
    }
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    n1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `probs[e * H + h]` is the `S×S` attention matrix of head `h` on example `e`.
    probs: Vec<Matrix>,
    o: Matrix,
    ln2: LnCache,
    n2: Matrix,
    h1: Matrix,
    a1: Matrix,
    weff: [Matrix; 6],
}

/// Activations retained by [`forward`] for the backward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    pooled: Matrix,
    pub logits: Matrix,
}

/// Gradients of the mean cross-entropy.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// `(∂F/∂B, ∂F/∂A)` per LoRA module in host order; empty when there are no modules.
    pub lora: Vec<(Matrix, Matrix)>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    /// `∂F/∂W` of each masked effective weight, host order. Reference only; frozen weights never update.
    pub effective_weight: Vec<Matrix>,
}

fn check_inputs(model: &FrozenModel, adapters: &Adapters, masks: &MaskSet, batch: &Batch) -> Result<()> {
    let config = model.config();
    adapters.validate(config)?;
    if masks.num_layers() != config.num_blocks || masks.groups_per_layer() != config.groups_per_block() {
        return Err(Error::config("mask bit-vectors do not match group counts"));
    }
    if batch.inputs.cols() != config.d_model || batch.inputs.rows() != batch.len() * config.seq_len {
        return Err(Error::Shape {
            op: "forward",
            left: batch.inputs.shape(),
            right: (batch.len() * config.seq_len, config.d_model),
        });
    }
    Ok(())
}

/// `mask ⊙ (W0 + (alpha/r)·B·A)` with the mask applied to the host's group axis.
pub(crate) fn effective_weight(
    model: &FrozenModel,
    adapters: &Adapters,
    masks: &MaskSet,
    host: HostId,
) -> Matrix {
    let mut w = model.weight(host).clone();
    if let Some(m) = adapters.lora(host) {
        w.axpy(m.scale(), &m.product()).expect("lora conforms to host");
    }
    let mask = masks.host_mask(model.config(), host);
    apply_group_mask(&mut w, &mask, host.kind.groups_by_column());
    w
}

pub(crate) fn apply_group_mask(w: &mut Matrix, mask: &[f64], by_column: bool) {
    if mask.iter().all(|&m| m == 1.0) {
        return;
    }
    let cols = w.cols();
    for i in 0..w.rows() {
        let row = w.row_mut(i);
        if by_column {
            for (x, &m) in row.iter_mut().zip(mask) {
                if m == 0.0 {
                    *x = 0.0;
                }
            }
        } else if mask[i] == 0.0 {
            row[..cols].fill(0.0);
        }
    }
}

fn layer_norm(x: &Matrix, p: &LayerNormParams) -> (Matrix, LnCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[(i, j)] = h;
            out[(i, j)] = p.gamma[j] * h + p.beta[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Matrix, p: &LayerNormParams, cache: &LnCache) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    for i in 0..dy.rows() {
        let xh = cache.xhat.row(i);
        let dxh: Vec<f64> = dy.row(i).iter().zip(&p.gamma).map(|(g, w)| g * w).collect();
        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = cache.inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    a.matmul(b).expect("internal shapes conform")
}

/// Runs the model; returns `batch × num_classes` logits and the activation cache.
pub fn forward(
    model: &FrozenModel,
    adapters: &Adapters,
    masks: &MaskSet,
    batch: &Batch,
) -> Result<ForwardCache> {
    check_inputs(model, adapters, masks, batch)?;
    let config = model.config();
    let (s_len, dh, heads) = (config.seq_len, config.head_dim, config.num_heads);
    let n = batch.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = batch.inputs.clone();
    let mut caches = Vec::with_capacity(config.num_blocks);
    for (l, block) in model.blocks().iter().enumerate() {
        let weff = LayerKind::ALL.map(|k| effective_weight(model, adapters, masks, HostId::new(l, k)));
        let (n1, ln1) = layer_norm(&x, &block.ln1);
        let q = mm(&n1, &weff[0]);
        let k = mm(&n1, &weff[1]);
        let v = mm(&n1, &weff[2]);
        let mut o = Matrix::zeros(x.rows(), config.d_model);
        let mut probs = Vec::with_capacity(n * heads);
        for e in 0..n {
            let r0 = e * s_len;
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Matrix::zeros(s_len, s_len);
                for i in 0..s_len {
                    let qi = &q.row(r0 + i)[c0..c0 + dh];
                    let prow = p.row_mut(i);
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &k.row(r0 + j)[c0..c0 + dh];
                        *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                }
                for i in 0..s_len {
                    for j in 0..s_len {
                        let pij = p[(i, j)];
                        let vj = &v.row(r0 + j)[c0..c0 + dh];
                        let orow = &mut o.row_mut(r0 + i)[c0..c0 + dh];
                        for (ov, vv) in orow.iter_mut().zip(vj) {
                            *ov += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let attn = mm(&o, &weff[3]);
        let x1 = x.add(&attn)?;
        let (n2, ln2) = layer_norm(&x1, &block.ln2);
        let h1 = mm(&n2, &weff[4]);
        let a1 = h1.map(gelu);
        let h2 = mm(&a1, &weff[5]);
        x = x1.add(&h2)?;
        caches.push(BlockCache {
            ln1,
            n1,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            n2,
            h1,
            a1,
            weff,
        });
    }

    let mut pooled = Matrix::zeros(n, config.d_model);
    for e in 0..n {
        let prow = pooled.row_mut(e);
        for s in 0..s_len {
            for (p, v) in prow.iter_mut().zip(x.row(e * s_len + s)) {
                *p += v;
            }
        }
        for p in prow.iter_mut() {
            *p /= s_len as f64;
        }
    }
    let mut logits = mm(&pooled, &adapters.head.weight);
    for e in 0..n {
        for (z, b) in logits.row_mut(e).iter_mut().zip(&adapters.head.bias) {
            *z += b;
        }
    }
    Ok(ForwardCache {
        blocks: caches,
        pooled,
        logits,
    })
}

/// Mean cross-entropy of logits against labels, and the row-wise softmax.
pub(crate) fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (e, &y) in labels.iter().enumerate() {
        let row = probs.row_mut(e);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    (loss / labels.len() as f64, probs)
}

/// Mean cross-entropy loss and its gradients for every trainable parameter.
pub fn loss_and_grads(
    model: &FrozenModel,
    adapters: &Adapters,
    masks: &MaskSet,
    batch: &Batch,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let cache = forward(model, adapters, masks, batch)?;
    let config = model.config();
    let (s_len, dh, heads) = (config.seq_len, config.head_dim, config.num_heads);
    let n = batch.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let (loss, mut dlogits) = cross_entropy(&cache.logits, &batch.labels);
    for (e, &y) in batch.labels.iter().enumerate() {
        dlogits[(e, y)] -= 1.0;
    }
    dlogits.scale_in_place(1.0 / n as f64);

    let head_weight = cache.pooled.t_matmul(&dlogits)?;
    let head_bias: Vec<f64> = (0..config.num_classes).map(|c| dlogits.col(c).iter().sum()).collect();
    let dpooled = dlogits.matmul_t(&adapters.head.weight)?;

    let mut dx = Matrix::zeros(n * s_len, config.d_model);
    for e in 0..n {
        for s in 0..s_len {
            for (d, g) in dx.row_mut(e * s_len + s).iter_mut().zip(dpooled.row(e)) {
                *d = g / s_len as f64;
            }
        }
    }

    let mut weight_grads: Vec<Matrix> = Vec::with_capacity(config.num_blocks * 6);
    let mut per_block: Vec<[Matrix; 6]> = Vec::with_capacity(config.num_blocks);
    for (l, bc) in cache.blocks.iter().enumerate().rev() {
        let block = &model.blocks()[l];
        // FFN sublayer.
        let g_ffn2 = bc.a1.t_matmul(&dx)?;
        let da1 = dx.matmul_t(&bc.weff[5])?;
        let mut dh1 = da1;
        for (g, &h) in dh1.data_mut().iter_mut().zip(bc.h1.data()) {
            *g *= gelu_grad(h);
        }
        let g_ffn1 = bc.n2.t_matmul(&dh1)?;
        let dn2 = dh1.matmul_t(&bc.weff[4])?;
        let dx1 = dx.add(&layer_norm_backward(&dn2, &block.ln2, &bc.ln2))?;

        // Attention sublayer.
        let g_out = bc.o.t_matmul(&dx1)?;
        let d_o = dx1.matmul_t(&bc.weff[3])?;
        let mut dq = Matrix::zeros(n * s_len, config.d_model);
        let mut dk = Matrix::zeros(n * s_len, config.d_model);
        let mut dv = Matrix::zeros(n * s_len, config.d_model);
        for e in 0..n {
            let r0 = e * s_len;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &bc.probs[e * heads + h];
                // dP = dO_h · V_hᵀ ; dV_h = Pᵀ · dO_h
                let mut dp = Matrix::zeros(s_len, s_len);
                for i in 0..s_len {
                    let doi = &d_o.row(r0 + i)[c0..c0 + dh];
                    for j in 0..s_len {
                        let vj = &bc.v.row(r0 + j)[c0..c0 + dh];
                        dp[(i, j)] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let pij = p[(i, j)];
                        let dvj = &mut dv.row_mut(r0 + j)[c0..c0 + dh];
                        for (t, g) in dvj.iter_mut().zip(doi) {
                            *t += pij * g;
                        }
                    }
                }
                for i in 0..s_len {
                    let inner: f64 = (0..s_len).map(|j| dp[(i, j)] * p[(i, j)]).sum();
                    for j in 0..s_len {
                        let ds = p[(i, j)] * (dp[(i, j)] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[(r0 + i, c0 + t)] += ds * bc.k[(r0 + j, c0 + t)];
                            dk[(r0 + j, c0 + t)] += ds * bc.q[(r0 + i, c0 + t)];
                        }
                    }
                }
            }
        }
        let g_q = bc.n1.t_matmul(&dq)?;
        let g_k = bc.n1.t_matmul(&dk)?;
        let g_v = bc.n1.t_matmul(&dv)?;
        let mut dn1 = dq.matmul_t(&bc.weff[0])?;
        dn1.axpy(1.0, &dk.matmul_t(&bc.weff[1])?)?;
        dn1.axpy(1.0, &dv.matmul_t(&bc.weff[2])?)?;
        dx = dx1.add(&layer_norm_backward(&dn1, &block.ln1, &bc.ln1))?;

        let mut grads = [g_q, g_k, g_v, g_out, g_ffn1, g_ffn2];
        for kind in LayerKind::ALL {
            let mask = masks.host_mask(config, HostId::new(l, kind));
            apply_group_mask(&mut grads[kind.index()], &mask, kind.groups_by_column());
        }
        per_block.push(grads);
    }
    per_block.reverse();
    for grads in per_block {
        weight_grads.extend(grads);
    }

    let lora = adapters
        .loras
        .iter()
        .map(|m| {
            let g = &weight_grads[m.host.slot()];
            let s = m.scale();
            let db = g.matmul_t(m.a()).map(|x| x.scale(s))?;
            let da = m.b().t_matmul(g).map(|x| x.scale(s))?;
            Ok((db, da))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        loss,
        Gradients {
            lora,
            head_weight,
            head_bias,
            effective_weight: weight_grads,
        },
    ))
}

/// Mean loss and accuracy without gradients.
pub fn evaluate(
    model: &FrozenModel,
    adapters: &Adapters,
    masks: &MaskSet,
    batch: &Batch,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let cache = forward(model, adapters, masks, batch)?;
    let (loss, probs) = cross_entropy(&cache.logits, &batch.labels);
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(e, &y)| {
            let row = probs.row(e);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap();
            best == y
        })
        .count();
    Ok((loss, correct as f64 / batch.len() as f64))
}
