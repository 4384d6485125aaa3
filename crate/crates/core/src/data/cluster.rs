//! Spectral clustering of the sensor graph into regions for continuous missing.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spectral::{normalized_laplacian, SensorGraph};

/// Region count used by the CM generator.
pub fn default_region_count(n_nodes: usize) -> usize {
    (n_nodes / 32).max(2).min(n_nodes.max(1))
}

/// Assigns every node a region id in `0..k`. Disconnected graphs are split
/// per component first so no region straddles two components.
pub fn spectral_clusters(graph: &SensorGraph, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = graph.n_nodes();
    if k == 0 || k > n {
        return Err(Error::Validation(format!("cannot split {n} nodes into {k} regions")));
    }
    let adj = graph.symmetrized();
    let comps = graph.components();
    let mut labels = vec![0usize; n];
    if comps.len() >= k {
        // more components than regions: pack whole components, largest first
        let mut order: Vec<&Vec<usize>> = comps.iter().collect();
        order.sort_by_key(|c| std::cmp::Reverse(c.len()));
        let mut load = vec![0usize; k];
        for c in order {
            let r = (0..k).min_by_key(|&r| (load[r], r)).unwrap();
            load[r] += c.len();
            for &i in c {
                labels[i] = r;
            }
        }
        return Ok(labels);
    }
    let quota = split_quota(&comps.iter().map(|c| c.len()).collect::<Vec<_>>(), k);
    let mut next = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (c, &kc) in comps.iter().zip(&quota) {
        let sub = DMatrix::from_fn(c.len(), c.len(), |i, j| adj[(c[i], c[j])]);
        let local = cluster_connected(&sub, kc, &mut rng)?;
        for (i, &node) in c.iter().enumerate() {
            labels[node] = next + local[i];
        }
        next += kc;
    }
    Ok(labels)
}

/// Distributes `k` regions over components proportionally to size, one each at least.
fn split_quota(sizes: &[usize], k: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut q: Vec<usize> = sizes.iter().map(|&s| ((s * k) / total).clamp(1, s)).collect();
    while q.iter().sum::<usize>() > k {
        let i = (0..q.len()).filter(|&i| q[i] > 1).max_by_key(|&i| q[i]).unwrap();
        q[i] -= 1;
    }
    while q.iter().sum::<usize>() < k {
        let i = (0..q.len())
            .filter(|&i| q[i] < sizes[i])
            .max_by(|&a, &b| {
                let ra = sizes[a] as f64 / q[a] as f64;
                let rb = sizes[b] as f64 / q[b] as f64;
                ra.total_cmp(&rb)
            })
            .unwrap();
        q[i] += 1;
    }
    q
}

fn cluster_connected(adj: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = adj.nrows();
    if k == 1 {
        return Ok(vec![0; n]);
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let lap = normalized_laplacian(adj)?;
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // rows of the k smallest eigenvectors, unit-normalized
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = order[..k].iter().map(|&j| eig.eigenvectors[(i, j)]).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    Ok(kmeans(&points, k, rng))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a k-means++ start. Empty clusters take the point
/// farthest from its centroid, so every label in `0..k` is used.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            centers.len()
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if r < di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            idx
        };
        centers.push(points[pick.min(n - 1)].clone());
    }
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k).min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b]))).unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centers[labels[a]]).total_cmp(&dist2(&points[b], &centers[labels[b]]))
                    })
                    .unwrap();
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}
