//! Experiment entry points shared by the CLI and the Python bindings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MissingPattern, Task};
use crate::data::masks::{self, MaskMeta};
use crate::data::{load_pems, Metrics, NormalizationStats, SpatialTemporalDataset};
use crate::error::{invalid, Error, Result};
use crate::model::{Batch, StdPlm};
use crate::nn::ParamReport;
use crate::runtime::checkpoint::{self, load_run, save_checkpoint, write_json, write_text, RunLock};
use crate::runtime::evaluate::{evaluate_windows, CopyLast, ModelPredictor, NodeMean};
use crate::runtime::prepare::PreparedData;
use crate::runtime::train::{fit, SeedOutcome};
use crate::spectral;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSeed {
    pub mae: Vec<f64>,
    pub rmse: Vec<f64>,
    pub mape: Vec<f64>,
    pub best_epoch: Vec<usize>,
    pub stopped_epoch: Vec<usize>,
    pub best_val_mae: Vec<f64>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task: Task,
    pub dataset: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub mae_std: f64,
    pub rmse_std: f64,
    pub mape_std: f64,
    pub seeds: Vec<u64>,
    pub per_seed: PerSeed,
    /// Seed whose weights are in the checkpoint (lowest validation MAE).
    pub checkpoint_seed: u64,
    pub checkpoint_metrics: Metrics,
    pub baselines: BTreeMap<String, Metrics>,
    pub params: ParamReport,
    pub trainable_ratio: f64,
    pub train_windows: usize,
    pub wall_clock_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub model: StdPlm,
    pub data: PreparedData,
    pub seeds: Vec<SeedOutcome>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

/// Loads the dataset named by the config. Relative paths are taken from `base`.
pub fn load_dataset(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<SpatialTemporalDataset> {
    let mut ds = load_pems(
        &resolve(base, &cfg.data.path),
        &resolve(base, &cfg.data.adjacency),
        cfg.model.interval_seconds,
        &cfg.data.start_time,
        cfg.model.adjacency_mode,
    )?;
    if !cfg.data.name.is_empty() {
        ds.name = cfg.data.name.clone();
    }
    Ok(ds)
}

/// Locates the data archive and edge list inside a dataset directory.
pub fn dataset_dir_files(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut data = None;
    let mut adj = None;
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        match p.extension().and_then(|e| e.to_str()) {
            Some("npz") | Some("npy") if data.is_none() => data = Some(p),
            Some("csv") if adj.is_none() => adj = Some(p),
            _ => {}
        }
    }
    match (data, adj) {
        (Some(d), Some(a)) => Ok((d, a)),
        _ => Err(invalid!("{} must contain one .npz/.npy archive and one .csv edge list", dir.display())),
    }
}

/// Generates the configured missing pattern over the whole series.
pub fn injected_mask(cfg: &ExperimentConfig, ds: &SpatialTemporalDataset) -> Result<Option<(Array3<bool>, MaskMeta)>> {
    let Some(m) = &cfg.missing else {
        return Ok(None);
    };
    gen_missing(ds, m.pattern, m.rate, m.seed).map(Some)
}

pub fn gen_missing(
    ds: &SpatialTemporalDataset,
    pattern: MissingPattern,
    rate: f64,
    seed: u64,
) -> Result<(Array3<bool>, MaskMeta)> {
    let shape = ds.data.dim();
    let (mask, regions) = match pattern {
        MissingPattern::Rm => (masks::generate_rm(shape, rate, seed)?, None),
        MissingPattern::Cm => {
            let cm = masks::generate_cm(&ds.graph, shape, rate, seed)?;
            (cm.mask, Some(cm.regions))
        }
    };
    let meta = MaskMeta {
        pattern,
        rate,
        seed,
        shape: [shape.0, shape.1, shape.2],
        achieved_rate: masks::missing_fraction(&mask),
        regions,
    };
    Ok((mask, meta))
}

pub fn mask_file_name(meta: &MaskMeta) -> String {
    let p = match meta.pattern {
        MissingPattern::Rm => "rm",
        MissingPattern::Cm => "cm",
    };
    format!("{p}-{}-{}.bits", meta.rate, meta.seed)
}

/// Trains every configured seed. No files are written.
pub fn train_experiment(
    cfg: &ExperimentConfig,
    ds: &SpatialTemporalDataset,
    injected: Option<&Array3<bool>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.task == Task::Impute && cfg.train.condition_ratio[1] <= 0.0 {
        return Err(invalid!("imputation training needs a positive condition ratio"));
    }
    let start = Instant::now();
    let data = PreparedData::new(ds, cfg.task, &cfg.model, &cfg.train, injected)?;
    let mut seeds = Vec::new();
    let mut best: Option<(f64, StdPlm)> = None;
    for &seed in &cfg.train.seeds {
        let model = StdPlm::new(&cfg.model, &ds.graph, &Device::Cpu, cfg.dtype(), seed)?;
        log::info!("seed {seed}: {} parameters, {} trainable", model.param_report().total, model.param_report().trainable);
        let outcome = fit(&model, &data, &cfg.train, seed)?;
        if best.as_ref().is_none_or(|(v, _)| outcome.best_val_mae < *v) {
            best = Some((outcome.best_val_mae, model));
        }
        seeds.push(outcome);
    }
    let (_, model) = best.expect("at least one seed");
    let checkpoint_seed = seeds
        .iter()
        .min_by(|a, b| a.best_val_mae.total_cmp(&b.best_val_mae))
        .expect("at least one seed");
    let col = |f: fn(&Metrics) -> f64| seeds.iter().map(|s| f(&s.test)).collect::<Vec<_>>();
    let (mae, rmse, mape) = (col(|m| m.mae), col(|m| m.rmse), col(|m| m.mape));
    let eb = cfg.train.eval_batch_size;
    let mut baselines = BTreeMap::new();
    baselines.insert("copy_last".to_string(), evaluate_windows(&CopyLast, &data, &data.test, eb)?);
    baselines.insert("node_mean".to_string(), evaluate_windows(&NodeMean, &data, &data.test, eb)?);
    let params = model.param_report();
    let metrics = RunMetrics {
        task: cfg.task,
        dataset: ds.name.clone(),
        mae: mean_std(&mae).0,
        rmse: mean_std(&rmse).0,
        mape: mean_std(&mape).0,
        mae_std: mean_std(&mae).1,
        rmse_std: mean_std(&rmse).1,
        mape_std: mean_std(&mape).1,
        seeds: cfg.train.seeds.clone(),
        per_seed: PerSeed {
            mae,
            rmse,
            mape,
            best_epoch: seeds.iter().map(|s| s.best_epoch).collect(),
            stopped_epoch: seeds.iter().map(|s| s.stopped_epoch).collect(),
            best_val_mae: seeds.iter().map(|s| s.best_val_mae).collect(),
        },
        checkpoint_seed: checkpoint_seed.seed,
        checkpoint_metrics: checkpoint_seed.test,
        baselines,
        trainable_ratio: params.trainable_ratio(),
        params,
        train_windows: data.train.len(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        metrics,
        model,
        data,
        seeds,
    })
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &TrainOutcome, injected: Option<&(Array3<bool>, MaskMeta)>) -> Result<()> {
    save_checkpoint(dir, &out.model, cfg, &out.data.stats)?;
    write_json(&dir.join(checkpoint::METRICS_FILE), &out.metrics)?;
    write_json(&dir.join(checkpoint::HISTORY_FILE), &out.seeds)?;
    write_text(&dir.join(checkpoint::PARAMS_FILE), &out.metrics.params.table("STD-PLM"))?;
    let masks_dir = dir.join(checkpoint::MASKS_DIR);
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(format!("creating {}", masks_dir.display()), e))?;
    let plots = dir.join(checkpoint::PLOTS_DIR);
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(format!("creating {}", plots.display()), e))?;
    crate::runtime::report::history_plots(&plots, &out.metrics.dataset, &out.seeds)?;
    if let Some((mask, meta)) = injected {
        masks::save_mask(&masks_dir.join(mask_file_name(meta)), mask, meta)?;
    }
    Ok(())
}

/// `train`: loads data, trains all seeds and writes the run directory.
pub fn train_run(cfg: &ExperimentConfig, base: Option<&Path>, run_dir: &Path) -> Result<RunMetrics> {
    let _lock = RunLock::acquire(run_dir)?;
    let ds = load_dataset(cfg, base)?;
    let mut cfg = cfg.clone();
    cfg.data.path = resolve(base, &cfg.data.path);
    cfg.data.adjacency = resolve(base, &cfg.data.adjacency);
    let injected = injected_mask(&cfg, &ds)?;
    let out = train_experiment(&cfg, &ds, injected.as_ref().map(|(m, _)| m))?;
    write_run(run_dir, &cfg, &out, injected.as_ref())?;
    Ok(out.metrics)
}

/// `few-shot`: training restricted to the first `ratio` of training windows.
pub fn few_shot_run(cfg: &ExperimentConfig, ratio: f64, base: Option<&Path>, run_dir: &Path) -> Result<RunMetrics> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid!("few-shot ratio {ratio} outside (0, 1]"));
    }
    let mut cfg = cfg.clone();
    cfg.train.few_shot_ratio = Some(ratio);
    train_run(&cfg, base, run_dir)
}

/// Injected mask persisted in a run directory, if any.
pub fn run_mask(run_dir: &Path) -> Result<Option<(Array3<bool>, MaskMeta)>> {
    let dir = run_dir.join(checkpoint::MASKS_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut bits: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bits"))
        .collect();
    bits.sort();
    match bits.first() {
        Some(p) => masks::load_mask(p).map(Some),
        None => Ok(None),
    }
}

/// `evaluate`: test metrics of a run's checkpoint on its own dataset.
pub fn evaluate_run(run_dir: &Path) -> Result<Metrics> {
    let cfg = ExperimentConfig::load(&run_dir.join(checkpoint::CONFIG_FILE))?;
    let ds = load_dataset(&cfg, None)?;
    let run = load_run(run_dir, &ds.graph, true)?;
    if run.config.model.channels != ds.channels() {
        return Err(Error::Config(format!(
            "checkpoint expects {} channels, dataset has {}",
            run.config.model.channels,
            ds.channels()
        )));
    }
    let mask = run_mask(run_dir)?;
    let data = PreparedData::new(&ds, cfg.task, &cfg.model, &cfg.train, mask.as_ref().map(|(m, _)| m))?;
    evaluate_windows(&ModelPredictor(&run.model), &data, &data.test, cfg.train.eval_batch_size)
}

/// Zero-shot transfer result: model metrics plus the copy-last reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    pub source: String,
    pub target: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub baselines: BTreeMap<String, Metrics>,
}

/// `zero-shot`: applies a trained run to another graph without weight
/// updates. The spectral basis is rebuilt for the target graph and
/// normalization statistics come from the target's training split.
pub fn zero_shot(run_dir: &Path, target: &SpatialTemporalDataset) -> Result<TransferMetrics> {
    let run = load_run(run_dir, &target.graph, false)?;
    let cfg = &run.config;
    if cfg.model.channels != target.channels() {
        return Err(Error::Config(format!(
            "model has {} channels, target has {}",
            cfg.model.channels,
            target.channels()
        )));
    }
    if cfg.model.interval_seconds != target.interval_seconds {
        return Err(Error::Config(format!(
            "model uses {} s steps, target has {} s",
            cfg.model.interval_seconds, target.interval_seconds
        )));
    }
    let injected = injected_mask(cfg, target)?;
    let data = PreparedData::new(target, cfg.task, &cfg.model, &cfg.train, injected.as_ref().map(|(m, _)| m))?;
    let eb = cfg.train.eval_batch_size;
    let m = evaluate_windows(&ModelPredictor(&run.model), &data, &data.test, eb)?;
    let mut baselines = BTreeMap::new();
    baselines.insert("copy_last".into(), evaluate_windows(&CopyLast, &data, &data.test, eb)?);
    baselines.insert("node_mean".into(), evaluate_windows(&NodeMean, &data, &data.test, eb)?);
    Ok(TransferMetrics {
        source: cfg.data.name.clone(),
        target: target.name.clone(),
        mae: m.mae,
        rmse: m.rmse,
        mape: m.mape,
        baselines,
    })
}

/// One model pass on the window starting at `start`; returns de-normalized
/// output as T_out x N x C.
pub fn infer_window(
    model: &StdPlm,
    stats: &NormalizationStats,
    ds: &SpatialTemporalDataset,
    visible: &Array3<bool>,
    start: usize,
) -> Result<Array3<f32>> {
    let cfg = model.config();
    let (w, h) = (cfg.window, cfg.horizon);
    let (t_total, n, c) = ds.data.dim();
    if start + w > t_total {
        return Err(invalid!("window at {start} runs past the series end {t_total}"));
    }
    let norm = stats.normalize(&ds.data.slice(ndarray::s![start..start + w, .., ..]).to_owned());
    let vis = visible.slice(ndarray::s![start..start + w, .., ..]);
    let x: Vec<f32> = Zip::from(&norm).and(&vis).map_collect(|&v, &m| if m { v } else { 0.0 }).into_raw_vec_and_offset().0;
    let mask: Vec<f32> = vis.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut tod = Vec::with_capacity(w);
    let mut dow = Vec::with_capacity(w);
    for &ts in &ds.timestamps[start..start + w] {
        let (a, b) = spectral::time_indices(ts, ds.interval_seconds)?;
        tod.push(a as u32);
        dow.push(b as u32);
    }
    let dev = model.device();
    let dt = model.dtype();
    let batch = Batch {
        x: Tensor::from_vec(x, (1, w, n, c), dev)?.to_dtype(dt)?,
        mask: Tensor::from_vec(mask, (1, w, n, c), dev)?.to_dtype(dt)?,
        tod: Tensor::from_vec(tod, (1, w), dev)?,
        dow: Tensor::from_vec(dow, (1, w), dev)?,
    };
    let y = model.forward(&batch)?.y.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_fn((h, n, c), |(t, i, ch)| {
        stats.denorm_value(y[i * h * c + t * c + ch] as f64, ch) as f32
    }))
}

/// `forecast`: the horizon following the window that ends at `end`.
pub fn forecast(run_dir: &Path, ds: &SpatialTemporalDataset, end: Option<usize>) -> Result<Array3<f32>> {
    let run = load_run(run_dir, &ds.graph, false)?;
    if run.config.task != Task::Forecast {
        return Err(Error::Config("run was trained for imputation".into()));
    }
    let w = run.config.model.window;
    let end = end.unwrap_or(ds.len());
    if end < w || end > ds.len() {
        return Err(invalid!("window end {end} outside [{w}, {}]", ds.len()));
    }
    infer_window(&run.model, &run.stats, ds, &ds.observed, end - w)
}

/// `impute`: fills every cell hidden by `mask` (or unobserved) using
/// consecutive windows; the last window is aligned to the series end.
pub fn impute(run_dir: &Path, ds: &SpatialTemporalDataset, mask: Option<&Array3<bool>>) -> Result<Array3<f32>> {
    let run = load_run(run_dir, &ds.graph, false)?;
    if run.config.task != Task::Impute {
        return Err(Error::Config("run was trained for forecasting".into()));
    }
    let visible = match mask {
        Some(m) if m.dim() == ds.data.dim() => Zip::from(&ds.observed).and(m).map_collect(|&o, &v| o && v),
        Some(m) => return Err(invalid!("mask shape {:?} does not match data {:?}", m.dim(), ds.data.dim())),
        None => ds.observed.clone(),
    };
    let w = run.config.model.window;
    if ds.len() < w {
        return Err(invalid!("series shorter than one window"));
    }
    let mut out = ds.data.clone();
    let mut starts: Vec<usize> = (0..=ds.len() - w).step_by(w).collect();
    if starts.last() != Some(&(ds.len() - w)) {
        starts.push(ds.len() - w);
    }
    for s in starts {
        let y = infer_window(&run.model, &run.stats, ds, &visible, s)?;
        for ((t, i, ch), &v) in y.indexed_iter() {
            if !visible[[s + t, i, ch]] {
                out[[s + t, i, ch]] = v;
            }
        }
    }
    Ok(out)
}

/// Dataset of a graph stored alongside the run (used by `report`).
pub fn run_dataset(run_dir: &Path) -> Result<(ExperimentConfig, SpatialTemporalDataset)> {
    let cfg = ExperimentConfig::load(&run_dir.join(checkpoint::CONFIG_FILE))?;
    let ds = load_dataset(&cfg, None)?;
    Ok((cfg, ds))
}
