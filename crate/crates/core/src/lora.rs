//! LoRA adapters: initialization, rank resizing and module importance.
//!
//! A module attached to a frozen `d×k` host weight holds `b: d×r` and
//! `a: r×k`; its contribution to the layer output is `(alpha / r) · x·b·a`.

use crate::error::{Error, Result};
use crate::model::HostId;
use crate::numkit::{gaussian_fill, numerical_rank, svd_thin, truncated_factor, Matrix, RngStream};

pub const DEFAULT_ALPHA: f64 = 16.0;
/// Standard deviation of freshly drawn `a` rows.
pub const INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    pub host: HostId,
    b: Matrix,
    a: Matrix,
    alpha: f64,
}

impl LoraModule {
    /// `b = 0`, `a ~ N(0, INIT_SIGMA²)`.
    pub fn init(
        host: HostId,
        shape: (usize, usize),
        rank: usize,
        alpha: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let (d, k) = shape;
        check_rank(rank, d, k)?;
        Ok(LoraModule {
            host,
            b: Matrix::zeros(d, rank),
            a: gaussian_fill(rng, rank, k, INIT_SIGMA),
            alpha,
        })
    }

    pub fn from_factors(host: HostId, b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Shape {
                op: "lora factors",
                left: b.shape(),
                right: a.shape(),
            });
        }
        check_rank(b.cols(), b.rows(), a.cols())?;
        if !(alpha > 0.0) {
            return Err(Error::arg(format!("alpha must be positive, got {alpha}")));
        }
        Ok(LoraModule { host, b, a, alpha })
    }

    /// Module of rank `rank` whose effective update `(alpha/rank)·b·a` is the
    /// best rank-`rank` approximation of `delta`.
    ///
    /// The product is factored at its numerical rank (capped at `rank`) and
    /// then grown, so the extra `a` rows are fresh Gaussian draws rather than
    /// zeros. An all-zero `delta` gives a freshly initialized module.
    pub fn from_delta(
        host: HostId,
        delta: &Matrix,
        rank: usize,
        alpha: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let (d, k) = delta.shape();
        check_rank(rank, d, k)?;
        let target = delta.scale(rank as f64 / alpha);
        let keep = numerical_rank(&svd_thin(&target)?.s, 1e-10).min(rank);
        if keep == 0 {
            return LoraModule::init(host, (d, k), rank, alpha, rng);
        }
        let (b, a) = truncated_factor(&target, keep)?;
        let m = LoraModule { host, b, a, alpha };
        if keep < rank {
            m.grow_rank(rank, rng)
        } else {
            Ok(m)
        }
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.b, &mut self.a)
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Host weight shape `(d, k)`.
    pub fn host_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `b · a`, without the `alpha / r` factor.
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("lora factors conform")
    }

    /// The effective weight update `(alpha / r) · b · a`.
    pub fn delta(&self) -> Matrix {
        self.product().scale(self.scale())
    }

    pub fn num_params(&self) -> usize {
        self.b.len() + self.a.len()
    }

    /// Appends zero columns to `b` and Gaussian rows to `a`; `b·a` is unchanged.
    pub fn grow_rank(&self, new_rank: usize, rng: &mut RngStream) -> Result<Self> {
        if new_rank <= self.rank() {
            return Err(Error::arg(format!(
                "grow_rank needs a larger rank: {} -> {new_rank}",
                self.rank()
            )));
        }
        let (d, k) = self.host_shape();
        check_rank(new_rank, d, k)?;
        let extra = new_rank - self.rank();
        let b = self.b.hstack(&Matrix::zeros(d, extra))?;
        let a = self.a.vstack(&gaussian_fill(rng, extra, k, INIT_SIGMA))?;
        Ok(LoraModule {
            host: self.host,
            b,
            a,
            alpha: self.alpha,
        })
    }

    /// Refactors `b·a` at a lower rank via truncated SVD.
    pub fn shrink_rank(&self, new_rank: usize) -> Result<Self> {
        if new_rank == 0 || new_rank >= self.rank() {
            return Err(Error::arg(format!(
                "shrink_rank needs 1 <= new rank < {}, got {new_rank}",
                self.rank()
            )));
        }
        let (b, a) = truncated_factor(&self.product(), new_rank)?;
        Ok(LoraModule {
            host: self.host,
            b,
            a,
            alpha: self.alpha,
        })
    }
}

fn check_rank(rank: usize, d: usize, k: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::arg(format!(
            "lora rank {rank} outside [1, {}] for {d}x{k} host",
            d.min(k)
        )));
    }
    Ok(())
}

/// Importance of one device's set of LoRA modules.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleImportance {
    /// `I(B^l)` for each transformer block.
    pub per_layer: Vec<f64>,
    /// Mean over modules of the summed singular values of `b`.
    pub singular_term: f64,
    pub total: f64,
}

impl ModuleImportance {
    pub fn from_parts(per_layer: Vec<f64>, singular_values: &[Vec<f64>]) -> Self {
        let singular_term = if singular_values.is_empty() {
            0.0
        } else {
            singular_values.iter().map(|s| s.iter().sum::<f64>()).sum::<f64>()
                / singular_values.len() as f64
        };
        let total = per_layer.iter().sum::<f64>() + singular_term;
        ModuleImportance {
            per_layer,
            singular_term,
            total,
        }
    }
}

/// Sum of `(b ⊙ ∂F/∂b)²` over one module.
pub fn b_importance(b: &Matrix, grad_b: &Matrix) -> f64 {
    b.data()
        .iter()
        .zip(grad_b.data())
        .map(|(w, g)| (w * g).powi(2))
        .sum()
}

/// Combines per-module `b` importances (already summed over entries) with the
/// singular values of each module's `b`.
///
/// `b_scores[i]` pairs with `loras[i]`; modules are bucketed by their host block.
pub fn module_importance(
    loras: &[LoraModule],
    b_scores: &[f64],
    num_blocks: usize,
) -> Result<ModuleImportance> {
    if loras.len() != b_scores.len() {
        return Err(Error::arg("one importance score per lora module required"));
    }
    let mut per_layer = vec![0.0; num_blocks];
    let mut singular = Vec::with_capacity(loras.len());
    for (m, &score) in loras.iter().zip(b_scores) {
        let slot = per_layer
            .get_mut(m.host.block)
            .ok_or_else(|| Error::arg(format!("module host block {} out of range", m.host.block)))?;
        *slot += score;
        singular.push(svd_thin(m.b())?.s);
    }
    Ok(ModuleImportance::from_parts(per_layer, &singular))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;

    fn host() -> HostId {
        HostId::new(0, LayerKind::Query)
    }

    #[test]
    fn init_contributes_nothing() {
        let m = LoraModule::init(host(), (32, 32), 4, DEFAULT_ALPHA, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(m.product(), Matrix::zeros(32, 32));
        assert_eq!(m.num_params(), 256);
        let x = Matrix::filled(3, 32, 1.5);
        assert_eq!(x.matmul(&m.delta()).unwrap(), Matrix::zeros(3, 32));
    }

    #[test]
    fn init_is_deterministic() {
        let a = LoraModule::init(host(), (8, 6), 2, 16.0, &mut RngStream::new(5, 9)).unwrap();
        let b = LoraModule::init(host(), (8, 6), 2, 16.0, &mut RngStream::new(5, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_large_rank() {
        assert!(LoraModule::init(host(), (4, 3), 4, 16.0, &mut RngStream::new(0, 0)).is_err());
        assert!(LoraModule::init(host(), (4, 3), 0, 16.0, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn grow_and_shrink_argument_checks() {
        let m = LoraModule::init(host(), (6, 6), 3, 16.0, &mut RngStream::new(0, 0)).unwrap();
        assert!(m.grow_rank(3, &mut RngStream::new(0, 1)).is_err());
        assert!(m.grow_rank(7, &mut RngStream::new(0, 1)).is_err());
        assert!(m.shrink_rank(0).is_err());
        assert!(m.shrink_rank(3).is_err());
    }

    #[test]
    fn grow_keeps_product_bitwise() {
        let mut rng = RngStream::new(3, 3);
        let b = gaussian_fill(&mut rng, 6, 2, 1.0);
        let a = gaussian_fill(&mut rng, 2, 5, 1.0);
        let m = LoraModule::from_factors(host(), b, a, 16.0).unwrap();
        let g = m.grow_rank(4, &mut rng).unwrap();
        assert_eq!(g.rank(), 4);
        assert_eq!(g.product(), m.product());
    }

    #[test]
    fn shrink_diag_residual() {
        let b = Matrix::diag(&[3.0, 2.0, 1.0, 0.0]);
        let m = LoraModule::from_factors(host(), b, Matrix::identity(4), 16.0).unwrap();
        let s = m.shrink_rank(2).unwrap();
        let res = m.product().sub(&s.product()).unwrap().frobenius_norm();
        assert!((res * res - 1.0).abs() < 1e-12);
    }

    #[test]
    fn importance_zero_case() {
        let m = LoraModule::init(host(), (4, 4), 2, 16.0, &mut RngStream::new(0, 0)).unwrap();
        let imp = module_importance(&[m], &[0.0], 1).unwrap();
        assert_eq!(imp.total, 0.0);
    }

    #[test]
    fn importance_additivity_and_singular_term() {
        assert_eq!(ModuleImportance::from_parts(vec![1.0], &[vec![0.0]]).total, 1.0);
        assert_eq!(ModuleImportance::from_parts(vec![1.0, 2.0], &[]).total, 3.0);
        let single = ModuleImportance::from_parts(vec![0.0], &[vec![2.0, 0.0]]);
        assert_eq!(single.singular_term, 2.0);
        assert_eq!(single.total, 2.0);
    }

    #[test]
    fn b_importance_is_sum_of_squares() {
        let b = Matrix::from_rows(&[&[1.0, 2.0]]);
        let g = Matrix::from_rows(&[&[3.0, -1.0]]);
        assert_eq!(b_importance(&b, &g), 9.0 + 4.0);
    }
}
