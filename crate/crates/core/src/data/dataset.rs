use std::fs::File;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;
use ndarray::{Array1, Array3, ArrayView3, Axis};
use ndarray_npy::{NpzReader, NpzWriter, ReadNpyExt};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{self, AdjacencyMode, SensorGraph};

/// Sampling interval of the PEMS releases.
pub const PEMS_INTERVAL_SECONDS: u32 = 300;

#[derive(Debug, Clone)]
pub struct SpatialTemporalDataset {
    pub name: String,
    /// T_total x N x C.
    pub data: Array3<f32>,
    /// Ground-truth observation mask; NaN cells in the archive are unobserved.
    pub observed: Array3<bool>,
    /// Unix seconds, strictly increasing by `interval_seconds`.
    pub timestamps: Vec<i64>,
    pub graph: SensorGraph,
    pub interval_seconds: u32,
}

impl SpatialTemporalDataset {
    pub fn new(
        name: impl Into<String>,
        data: Array3<f32>,
        timestamps: Vec<i64>,
        graph: SensorGraph,
        interval_seconds: u32,
    ) -> Result<Self> {
        let (t, n, _) = data.dim();
        if graph.n_nodes() != n {
            return Err(invalid!("graph has {} nodes, data has {n}", graph.n_nodes()));
        }
        if timestamps.len() != t {
            return Err(invalid!("{} timestamps for {t} samples", timestamps.len()));
        }
        for w in timestamps.windows(2) {
            if w[1] - w[0] != interval_seconds as i64 {
                return Err(invalid!(
                    "timestamps must increase by {interval_seconds} s, found step {}",
                    w[1] - w[0]
                ));
            }
        }
        let observed = data.mapv(|v| v.is_finite());
        let data = data.mapv(|v| if v.is_finite() { v } else { 0.0 });
        Ok(Self {
            name: name.into(),
            data,
            observed,
            timestamps,
            graph,
            interval_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// (time-of-day slot, day-of-week) for every step.
    pub fn time_indices(&self) -> Result<Vec<(u32, u32)>> {
        self.timestamps
            .iter()
            .map(|&ts| {
                let (tod, dow) = spectral::time_indices(ts, self.interval_seconds)?;
                Ok((tod as u32, dow as u32))
            })
            .collect()
    }

    /// Writes the archive layout read by [`load_pems`]: `data` (f32, T x N x C)
    /// and `timestamps` (i64).
    pub fn save_npz(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut npz = NpzWriter::new(file);
        let data = ndarray::Zip::from(&self.data)
            .and(&self.observed)
            .map_collect(|&v, &o| if o { v } else { f32::NAN });
        npz.add_array("data", &data)
            .and_then(|_| npz.add_array("timestamps", &Array1::from(self.timestamps.clone())))
            .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))?;
        npz.finish()
            .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }
}

pub fn parse_start_time(s: &str) -> Result<i64> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .map(|t| t.and_utc().timestamp())
        .map_err(|e| Error::Config(format!("bad start_time {s:?}: {e}")))
}

pub fn regular_timestamps(start: i64, len: usize, interval_seconds: u32) -> Vec<i64> {
    (0..len as i64).map(|i| start + i * interval_seconds as i64).collect()
}

fn read_npz_array(npz: &mut NpzReader<File>, key: &str) -> Option<std::result::Result<Array3<f32>, String>> {
    let names = npz.names().ok()?;
    let name = names.iter().find(|n| *n == key || **n == format!("{key}.npy"))?.clone();
    let as_f32: std::result::Result<ndarray::ArrayD<f32>, _> = npz.by_name(&name);
    Some(match as_f32 {
        Ok(a) => a.into_dimensionality::<ndarray::Ix3>().map_err(|e| e.to_string()),
        Err(_) => {
            let as_f64: std::result::Result<ndarray::ArrayD<f64>, _> = npz.by_name(&name);
            as_f64
                .map_err(|e| e.to_string())
                .and_then(|a| a.into_dimensionality::<ndarray::Ix3>().map_err(|e| e.to_string()))
                .map(|a| a.mapv(|v| v as f32))
        }
    })
}

fn read_data(path: &Path) -> Result<(Array3<f32>, Option<Vec<i64>>)> {
    let open = || File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e));
    let is_npy = path.extension().is_some_and(|e| e == "npy");
    if is_npy {
        let bad = |e: ndarray_npy::ReadNpyError| Error::Format(format!("{}: expected a 3-d float array: {e}", path.display()));
        let arr = match Array3::<f32>::read_npy(open()?) {
            Ok(a) => a,
            Err(_) => Array3::<f64>::read_npy(open()?).map_err(bad)?.mapv(|v| v as f32),
        };
        return Ok((arr, None));
    }
    let mut npz =
        NpzReader::new(open()?).map_err(|e| Error::Format(format!("{}: not an npz archive: {e}", path.display())))?;
    let data = read_npz_array(&mut npz, "data")
        .ok_or_else(|| Error::Format(format!("{}: no `data` array", path.display())))?
        .map_err(|e| Error::Format(format!("{}: `data` must be a 3-d float array: {e}", path.display())))?;
    let names = npz.names().unwrap_or_default();
    let ts = match names.iter().find(|n| *n == "timestamps" || *n == "timestamps.npy") {
        Some(name) => {
            let name = name.clone();
            let a: Array1<i64> = npz
                .by_name(&name)
                .map_err(|e| Error::Format(format!("{}: bad `timestamps`: {e}", path.display())))?;
            Some(a.to_vec())
        }
        None => None,
    };
    Ok((data, ts))
}

/// Loads a T x N x C archive and its `from,to,cost` edge list.
pub fn load_pems(
    data_path: &Path,
    adjacency_path: &Path,
    interval_seconds: u32,
    start_time: &str,
    mode: AdjacencyMode,
) -> Result<SpatialTemporalDataset> {
    let (data, ts) = read_data(data_path)?;
    let (t, n, _) = data.dim();
    let graph = SensorGraph::read_csv(adjacency_path, n, mode)?;
    let timestamps = match ts {
        Some(ts) => ts,
        None => regular_timestamps(parse_start_time(start_time)?, t, interval_seconds),
    };
    let name = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SpatialTemporalDataset::new(name, data, timestamps, graph, interval_seconds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Chronological 60/20/20 split; floor division, remainder goes to test.
pub fn split_6_2_2(t_total: usize, window: usize) -> Result<Split> {
    if t_total < 3 * window {
        return Err(invalid!("{t_total} steps is too short to split with window {window}"));
    }
    let train = t_total * 6 / 10;
    let val = t_total * 2 / 10;
    Ok(Split {
        train: 0..train,
        val: train..train + val,
        test: train + val..t_total,
    })
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Fits on observed entries of `range` only. A channel with zero spread
    /// keeps std 1 so normalization stays invertible.
    pub fn fit(data: ArrayView3<f32>, observed: ArrayView3<bool>, range: Range<usize>) -> Result<Self> {
        let c = data.dim().2;
        let d = data.slice_axis(Axis(0), range.clone().into());
        let o = observed.slice_axis(Axis(0), range.into());
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let dv = d.index_axis(Axis(2), ch);
            let ov = o.index_axis(Axis(2), ch);
            let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
            for (&v, &m) in dv.iter().zip(ov.iter()) {
                if m {
                    n += 1;
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            if n == 0 {
                return Err(invalid!("channel {ch} has no observed training entries"));
            }
            let mu = s / n as f64;
            let var = (s2 / n as f64 - mu * mu).max(0.0);
            let sd = var.sqrt();
            mean.push(mu);
            std.push(if sd > 1e-8 * mu.abs().max(1.0) { sd } else { 1.0 });
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut out = x.clone();
        for (ch, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            lane.mapv_inplace(|v| ((v as f64 - m) / s) as f32);
        }
        out
    }

    pub fn denormalize(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut out = x.clone();
        for (ch, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            lane.mapv_inplace(|v| (v as f64 * s + m) as f32);
        }
        out
    }

    /// De-normalizes one value of channel `ch`.
    pub fn denorm_value(&self, v: f64, ch: usize) -> f64 {
        v * self.std[ch] + self.mean[ch]
    }
}
