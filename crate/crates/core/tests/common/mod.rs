//! Reference implementations used by the integration tests. Nothing here
//! calls into the library's numerical code.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
/// Returns eigenvalues and eigenvectors (columns), unsorted.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// `-Σ_m Σ_{i≠j} S[m,i] S[m,j] A[i,j]` by explicit loops.
pub fn structure_loss_loops(s: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for m in 0..s.nrows() {
        for i in 0..s.ncols() {
            for j in 0..s.ncols() {
                if i != j {
                    total += s[(m, i)] * s[(m, j)] * a[(i, j)];
                }
            }
        }
    }
    -total
}

/// Lanczos approximation (g = 7, n = 9) of ln Γ(x) for x > 0.
pub fn ln_gamma_lanczos(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma_lanczos(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Dirichlet log-density at a point of the simplex.
pub fn dirichlet_ln_pdf(alpha: &[f64], p: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let norm = ln_gamma_lanczos(a0) - alpha.iter().map(|a| ln_gamma_lanczos(*a)).sum::<f64>();
    norm + alpha.iter().zip(p).map(|(a, x)| (a - 1.0) * x.ln()).sum::<f64>()
}

/// `-ln Dir(softmax(column sums of S) | α)`, written out directly.
pub fn dirichlet_regularizer_ref(s: &DMatrix<f64>, alpha: &[f64]) -> f64 {
    let u: Vec<f64> = (0..s.ncols()).map(|j| (0..s.nrows()).map(|m| s[(m, j)]).sum()).collect();
    let z: f64 = u.iter().map(|v| v.exp()).sum();
    let p: Vec<f64> = u.iter().map(|v| v.exp() / z).collect();
    -dirichlet_ln_pdf(alpha, &p)
}

/// Random row-stochastic M x N matrix with strictly positive entries.
pub fn random_stochastic<R: Rng>(m: usize, n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut s = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.05..1.0));
    for mut row in s.row_iter_mut() {
        let t: f64 = row.iter().sum();
        row /= t;
    }
    s
}

/// Random symmetric 0/1 adjacency with zero diagonal.
pub fn random_adjacency<R: Rng>(n: usize, p: f64, rng: &mut R) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

pub fn complete_graph(n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::from_element(n, n, 1.0);
    a.fill_diagonal(0.0);
    a
}

/// `I - D^{-1/2} A D^{-1/2}` computed entry by entry.
pub fn laplacian_ref(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        if deg[i] == 0.0 || deg[j] == 0.0 {
            id
        } else {
            id - a[(i, j)] / (deg[i] * deg[j]).sqrt()
        }
    })
}

/// Central finite difference of a scalar function at every coordinate.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Max of |a - b| / max(|a|, |b|, floor) over all entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
