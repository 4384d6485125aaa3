//! Run-directory layout and model checkpoints.
//!
//! ```text
//! run/
//!   config.toml              experiment config
//!   checkpoint.safetensors   trainable parameters + cache.* tensors
//!   stats.json               normalization statistics
//!   metrics.json             test metrics, per-seed arrays
//!   history.json             per-epoch logs per seed
//!   params.md                parameter report
//!   masks/                   injected missing pattern
//!   plots/                   written by `report`
//! ```
//!
//! Frozen backbone weights are not copied; they are reloaded from the
//! checkpoint locator recorded in the config.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;

use crate::config::{BackboneKind, ExperimentConfig};
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::StdPlm;
use crate::nn::ParamGroup;
use crate::spectral::{SensorGraph, SpectralBasis};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const STATS_FILE: &str = "stats.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.json";
pub const PARAMS_FILE: &str = "params.md";
pub const LOCK_FILE: &str = "train.lock";
pub const MASKS_DIR: &str = "masks";
pub const PLOTS_DIR: &str = "plots";

const BASIS_KEY: &str = "cache.basis";
const EIGEN_KEY: &str = "cache.eigenvalues";
const K_KEY: &str = "cache.k_effective";

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(format!("creating {}", path.display()), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes config, parameters with the spectral-basis cache, and statistics.
pub fn save_checkpoint(dir: &Path, model: &StdPlm, cfg: &ExperimentConfig, stats: &NormalizationStats) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    write_json(&dir.join(STATS_FILE), stats)?;
    let basis = &model.graph_cache().basis;
    let (n, k) = basis.vectors.shape();
    let dev = Device::Cpu;
    let mut extra = HashMap::new();
    extra.insert(
        BASIS_KEY.to_string(),
        Tensor::from_vec(basis.vectors.transpose().as_slice().to_vec(), (n, k), &dev)?,
    );
    extra.insert(EIGEN_KEY.to_string(), Tensor::from_vec(basis.eigenvalues.clone(), k, &dev)?);
    extra.insert(K_KEY.to_string(), Tensor::from_vec(vec![basis.k_effective as u32], 1, &dev)?);
    let trainable_only = cfg.model.backbone.kind == BackboneKind::Pretrained;
    model.store().save(&dir.join(CHECKPOINT_FILE), trainable_only, &extra)
}

#[derive(Debug)]
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub model: StdPlm,
    pub stats: NormalizationStats,
}

/// Rebuilds the model of a run directory against `graph`. With `use_cache`
/// the stored basis replaces the recomputed one; pass it only for the
/// training graph.
pub fn load_run(dir: &Path, graph: &SensorGraph, use_cache: bool) -> Result<LoadedRun> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let stats: NormalizationStats = read_json(&dir.join(STATS_FILE))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut tensors = candle_core::safetensors::load(&ckpt, &Device::Cpu)
        .map_err(|e| Error::Format(format!("{}: {e}", ckpt.display())))?;
    let basis_t = tensors.remove(BASIS_KEY);
    let eig = tensors.remove(EIGEN_KEY);
    let k_eff = tensors.remove(K_KEY);
    let seed = config.train.seeds[0];
    let mut model = StdPlm::new(&config.model, graph, &Device::Cpu, config.dtype(), seed)?;
    let missing: Vec<String> = model
        .store()
        .names()
        .filter(|n| model.store().group(n) != Some(ParamGroup::Frozen) && !tensors.contains_key(*n))
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Mapping {
            missing,
            unmatched: Vec::new(),
        });
    }
    model.store().restore(&tensors, false)?;
    if let (Some(b), Some(e), Some(k)) = (basis_t, eig, k_eff) {
        let (n, k_cols) = b.dims2()?;
        if use_cache && n == graph.n_nodes() {
            let v = b.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let basis = SpectralBasis {
                eigenvalues: e.to_dtype(DType::F64)?.to_vec1::<f64>()?,
                vectors: DMatrix::from_row_slice(n, k_cols, &v),
                k_requested: k_cols,
                k_effective: k.to_vec1::<u32>()?[0] as usize,
            };
            model.set_graph_with_basis(graph, basis)?;
        }
    }
    Ok(LoadedRun { config, model, stats })
}
