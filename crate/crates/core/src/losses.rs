//! Training objective: masked L1 plus the attention constraint
//! `L_C = L_G + L_R` on the precoder weights `S` (M x N).
//!
//! * `L_G = -Σ_m Σ_{i≠j} S[m,i] S[m,j] A[i,j]` rewards regions that attend to
//!   well-connected node sets.
//! * `L_R = -log Dir(softmax(Σ_m S[m,:]) | α)` keeps every node's total
//!   attention mass away from zero.
//!
//! Functions on `DMatrix` are the reference forms (with closed-form
//! gradients); the `*_tensor` functions are the batched, differentiable ones
//! used by the trainer.

use candle_core::{Tensor, D};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, structural, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l_g: f64,
    pub l_r: f64,
    pub total: f64,
    pub lambda_c: f64,
}

/// Dirichlet concentration, one entry per node.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    pub alpha: DVector<f64>,
}

impl DirichletParams {
    pub fn new(alpha: DVector<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(invalid!("Dirichlet concentrations must be positive and finite"));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(DVector::from_element(n, value))
    }

    /// `log Γ(Σα) - Σ log Γ(α_i)`, the part of the log-density independent of p.
    pub fn log_normalizer(&self) -> f64 {
        ln_gamma(self.alpha.sum()) - self.alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()
    }
}

/// Mean |y - target| over entries with `mask` set.
pub fn masked_l1(y: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if y.len() != target.len() || y.len() != mask.len() {
        return Err(structural!(
            "masked_l1 operands differ in length ({}, {}, {})",
            y.len(),
            target.len(),
            mask.len()
        ));
    }
    let (sum, count) = y
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, c), ((a, b), _)| (s + (a - b).abs(), c + 1));
    if count == 0 {
        return Err(invalid!("evaluation mask selects no entries"));
    }
    Ok(sum / count as f64)
}

/// Zero-diagonal copy: the i≠j sums never see self-loops.
fn off_diagonal(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = a.clone();
    a.fill_diagonal(0.0);
    a
}

fn check_s_a(s: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() != s.ncols() {
        return Err(structural!(
            "S is {}x{} but adjacency is {}x{}",
            s.nrows(),
            s.ncols(),
            a.nrows(),
            a.ncols()
        ));
    }
    Ok(())
}

pub fn structure_loss(s: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<f64> {
    check_s_a(s, a)?;
    let a = off_diagonal(a);
    Ok(-(s * &a).component_mul(s).sum())
}

/// dL_G/dS = -S (A + Aᵀ) with the diagonal removed.
pub fn structure_loss_grad(s: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_s_a(s, a)?;
    let a = off_diagonal(a);
    Ok(-(s * (&a + a.transpose())))
}

/// Column sums of S passed through a softmax.
fn node_mass_softmax(s: &DMatrix<f64>) -> DVector<f64> {
    let u: DVector<f64> = s.row_sum().transpose();
    let max = u.max();
    let e = u.map(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

pub fn dirichlet_regularizer(s: &DMatrix<f64>, alpha: &DirichletParams) -> Result<f64> {
    if alpha.alpha.len() != s.ncols() {
        return Err(structural!(
            "alpha has length {}, S has {} columns",
            alpha.alpha.len(),
            s.ncols()
        ));
    }
    let p = node_mass_softmax(s);
    if let Some(i) = p.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Numerical(format!(
            "node {i} has zero attention mass after softmax; log-density undefined"
        )));
    }
    let kernel: f64 = alpha
        .alpha
        .iter()
        .zip(p.iter())
        .map(|(a, pi)| (a - 1.0) * pi.ln())
        .sum();
    Ok(-(alpha.log_normalizer() + kernel))
}

/// Gradient of `dirichlet_regularizer` with respect to S. Every row of the
/// result is identical because S enters only through its column sums.
pub fn dirichlet_regularizer_grad(s: &DMatrix<f64>, alpha: &DirichletParams) -> Result<DMatrix<f64>> {
    if alpha.alpha.len() != s.ncols() {
        return Err(structural!("alpha/S size mismatch"));
    }
    let p = node_mass_softmax(s);
    let beta = alpha.alpha.map(|a| a - 1.0);
    let beta_sum = beta.sum();
    // d(-Σ β_i log p_i)/du_k = -(β_k - p_k Σβ)
    let du: DVector<f64> = -(beta - p * beta_sum);
    Ok(DMatrix::from_fn(s.nrows(), s.ncols(), |_, k| du[k]))
}

/// `α = 1.05 + softmax(degree)` on the symmetrized adjacency.
pub fn alpha_from_graph(a: &DMatrix<f64>) -> Result<DirichletParams> {
    crate::spectral::normalized_laplacian(a)?; // shape and sign checks
    let sym = (a + a.transpose()) * 0.5;
    let deg: DVector<f64> = sym.column_sum();
    let max = deg.max();
    let e = deg.map(|d| (d - max).exp());
    let z = e.sum();
    DirichletParams::new(e.map(|v| 1.05 + v / z))
}

pub fn total_loss(
    y: &[f64],
    target: &[f64],
    eval_mask: &[bool],
    s: &DMatrix<f64>,
    a: &DMatrix<f64>,
    alpha: &DirichletParams,
    lambda_c: f64,
) -> Result<LossBreakdown> {
    let l1 = masked_l1(y, target, eval_mask)?;
    let l_g = structure_loss(s, a)?;
    let l_r = dirichlet_regularizer(s, alpha)?;
    Ok(LossBreakdown {
        l1,
        l_g,
        l_r,
        total: l1 + lambda_c * (l_g + l_r),
        lambda_c,
    })
}

/// Batched masked L1: `y`, `target`, `mask` share a shape; returns a scalar.
pub fn masked_l1_tensor(y: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if y.shape() != target.shape() || y.shape() != mask.shape() {
        return Err(structural!(
            "masked L1 operands differ: {:?} {:?} {:?}",
            y.dims(),
            target.dims(),
            mask.dims()
        ));
    }
    let count = mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(invalid!("evaluation mask selects no entries"));
    }
    Ok(((y - target)?.abs()? * mask)?.sum_all()?.affine(1.0 / count, 0.0)?)
}

/// Per-sample `L_G` for S of shape (B, M, N) and a zero-diagonal adjacency (N, N).
pub fn structure_loss_tensor(s: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
    let sa = s.broadcast_matmul(adjacency)?;
    Ok((sa * s)?.sum((1, 2))?.neg()?)
}

/// Per-sample `L_R` for S of shape (B, M, N). `alpha_minus_one` has shape (N,).
pub fn dirichlet_regularizer_tensor(
    s: &Tensor,
    alpha_minus_one: &Tensor,
    log_normalizer: f64,
) -> Result<Tensor> {
    let u = s.sum(1)?;
    let max = u.max_keepdim(D::Minus1)?.detach();
    let shifted = u.broadcast_sub(&max)?;
    let log_p = shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(D::Minus1)?.log()?)?;
    let kernel = log_p.broadcast_mul(alpha_minus_one)?.sum(D::Minus1)?;
    Ok((kernel + log_normalizer)?.neg()?)
}
