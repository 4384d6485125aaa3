use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Error, Result};

/// How the `cost` column of an edge list enters the adjacency matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    /// Every listed edge contributes weight 1.
    #[default]
    Binary,
    /// Edge costs are used as-is.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Directed, weighted sensor graph with a dense adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGraph {
    n_nodes: usize,
    edges: Vec<Edge>,
    adjacency: DMatrix<f64>,
}

impl SensorGraph {
    pub fn from_edges(n_nodes: usize, edges: Vec<Edge>, mode: AdjacencyMode) -> Result<Self> {
        if n_nodes == 0 {
            return Err(invalid!("graph must have at least one node"));
        }
        let mut adjacency = DMatrix::zeros(n_nodes, n_nodes);
        for e in &edges {
            if e.src >= n_nodes || e.dst >= n_nodes {
                return Err(invalid!(
                    "edge ({}, {}) references a node outside 0..{n_nodes}",
                    e.src,
                    e.dst
                ));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(invalid!(
                    "edge ({}, {}) has invalid weight {}",
                    e.src,
                    e.dst,
                    e.weight
                ));
            }
            adjacency[(e.src, e.dst)] = match mode {
                AdjacencyMode::Binary => 1.0,
                AdjacencyMode::Weighted => e.weight,
            };
        }
        Ok(Self {
            n_nodes,
            edges,
            adjacency,
        })
    }

    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self> {
        check_adjacency(&adjacency)?;
        let n_nodes = adjacency.nrows();
        if n_nodes == 0 {
            return Err(invalid!("graph must have at least one node"));
        }
        let mut edges = Vec::new();
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                let w = adjacency[(i, j)];
                if w != 0.0 {
                    edges.push(Edge {
                        src: i,
                        dst: j,
                        weight: w,
                    });
                }
            }
        }
        Ok(Self {
            n_nodes,
            edges,
            adjacency,
        })
    }

    /// Reads a PEMS-style edge list with header `from,to,cost`.
    pub fn read_csv(path: &Path, n_nodes: usize, mode: AdjacencyMode) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading adjacency {}", path.display()), e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["from", "to", "cost"] {
            return Err(Error::Format(format!(
                "expected header `from,to,cost`, found `{header}`"
            )));
        }
        let mut edges = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "line {}: expected 3 fields, found {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse_idx = |s: &str| -> Result<usize> {
                // Some exports write node ids as floats ("12.0").
                s.parse::<usize>()
                    .or_else(|_| s.parse::<f64>().map(|v| v as usize))
                    .map_err(|_| Error::Format(format!("line {}: bad node id `{s}`", lineno + 2)))
            };
            let weight = fields[2]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad cost `{}`", lineno + 2, fields[2])))?;
            edges.push(Edge {
                src: parse_idx(fields[0])?,
                dst: parse_idx(fields[1])?,
                weight,
            });
        }
        Self::from_edges(n_nodes, edges, mode)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("from,to,cost\n");
        for e in &self.edges {
            out.push_str(&format!("{},{},{}\n", e.src, e.dst, e.weight));
        }
        std::fs::write(path, out)
            .map_err(|e| Error::io(format!("writing adjacency {}", path.display()), e))
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// (A + Aᵀ) / 2
    pub fn symmetrized(&self) -> DMatrix<f64> {
        (&self.adjacency + self.adjacency.transpose()) * 0.5
    }

    /// Symmetrized adjacency with binary weights and a zero diagonal.
    pub fn binary_symmetric(&self) -> DMatrix<f64> {
        let sym = self.symmetrized();
        DMatrix::from_fn(self.n_nodes, self.n_nodes, |i, j| {
            if i != j && sym[(i, j)] > 0.0 {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Normalized Laplacian of the symmetrized adjacency.
    pub fn laplacian(&self) -> Result<DMatrix<f64>> {
        super::normalized_laplacian(&self.symmetrized())
    }

    /// Connected components of the symmetrized graph, each sorted ascending.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let sym = self.symmetrized();
        let n = self.n_nodes;
        let mut label = vec![usize::MAX; n];
        let mut comps = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut members = vec![start];
            label[start] = id;
            let mut head = 0;
            while head < members.len() {
                let u = members[head];
                head += 1;
                for v in 0..n {
                    if label[v] == usize::MAX && sym[(u, v)] > 0.0 {
                        label[v] = id;
                        members.push(v);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }
}

pub(crate) fn check_adjacency(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(structural!(
            "adjacency must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        ));
    }
    if let Some(v) = a.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(invalid!("adjacency entries must be finite and nonnegative, found {v}"));
    }
    Ok(())
}
