//! Topology-aware node embeddings from the normalized graph Laplacian, and
//! periodic time-of-day / day-of-week lookup tables.
//!
//! The Laplacian is the symmetric normalization `L = I - D^{-1/2} A D^{-1/2}`.
//! It is sometimes printed as `I - D^{1/2} A D^{1/2}`; the inverse square root
//! is what keeps the spectrum inside `[0, 2]`.

mod graph;
mod time;

pub use graph::{AdjacencyMode, Edge, SensorGraph};
pub use time::{lookup_time_embedding, slots_per_day, time_indices, TimeEmbeddingTables};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{structural, Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;

/// Normalized Laplacian of a nonnegative adjacency matrix.
///
/// Isolated nodes get a zero inverse-root degree, so their row is the identity row.
pub fn normalized_laplacian(adjacency: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    graph::check_adjacency(adjacency)?;
    let n = adjacency.nrows();
    let inv_sqrt: Vec<f64> = adjacency
        .row_iter()
        .map(|row| {
            let d: f64 = row.iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * adjacency[(i, j)] * inv_sqrt[j]
    }))
}

/// Eigenvectors for the `k_requested` largest Laplacian eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// Descending; entries past `k_effective` are zero padding.
    pub eigenvalues: Vec<f64>,
    /// N x K, columns past `k_effective` are zero.
    pub vectors: DMatrix<f64>,
    pub k_requested: usize,
    pub k_effective: usize,
}

impl SpectralBasis {
    pub fn n_nodes(&self) -> usize {
        self.vectors.nrows()
    }
}

/// Top-K eigenpairs of a symmetric matrix, sign-fixed and zero-padded to width K.
pub fn spectral_basis(laplacian: &DMatrix<f64>, k: usize) -> Result<SpectralBasis> {
    let n = laplacian.nrows();
    if laplacian.ncols() != n {
        return Err(structural!("Laplacian must be square, got {}x{}", n, laplacian.ncols()));
    }
    if k == 0 {
        return Err(structural!("spectral basis width must be positive"));
    }
    let asym = (laplacian - laplacian.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::Validation(format!(
            "Laplacian is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::try_new(laplacian.clone(), f64::EPSILON, 10_000).ok_or_else(|| {
        Error::Numerical(format!(
            "symmetric eigensolver did not converge for a {n}x{n} Laplacian (max |entry| {:e})",
            laplacian.amax()
        ))
    })?;

    // Stable sort: ties keep ascending original column order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let k_effective = k.min(n);
    let mut vectors = DMatrix::zeros(n, k);
    let mut eigenvalues = vec![0.0; k];
    for (col, &src) in order.iter().take(k_effective).enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut v);
        vectors.set_column(col, &v);
        eigenvalues[col] = eig.eigenvalues[src];
    }
    Ok(SpectralBasis {
        eigenvalues,
        vectors,
        k_requested: k,
        k_effective,
    })
}

/// Flips `v` so that its first largest-magnitude component is nonnegative.
fn fix_sign(v: &mut DVector<f64>) {
    let max = v.amax();
    if max == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max - 1e-12)
        .unwrap_or(0);
    if v[pivot] < 0.0 {
        v.neg_mut();
    }
}

/// `E_N = V' W + b` with `W` of shape K x d_n.
pub fn node_embedding(
    basis: &SpectralBasis,
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let k = basis.vectors.ncols();
    if weights.nrows() != k {
        return Err(structural!("weights have {} rows, basis width is {k}", weights.nrows()));
    }
    if bias.len() != weights.ncols() {
        return Err(structural!(
            "bias length {} does not match embedding width {}",
            bias.len(),
            weights.ncols()
        ));
    }
    let mut out = &basis.vectors * weights;
    for mut row in out.row_iter_mut() {
        row += bias.transpose();
    }
    Ok(out)
}
