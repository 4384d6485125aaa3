//! Normalized series, window lists and host-side batch assembly.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Task, TrainConfig};
use crate::data::windows::first_fraction;
use crate::data::{condition_missing, make_windows, split_6_2_2, NormalizationStats, SpatialTemporalDataset, Split, WindowSpec};
use crate::error::{invalid, Result};
use crate::model::Batch;

/// Seed base for the fixed condition masks of imputation val/test windows
/// when no missing pattern was injected.
const EVAL_CONDITION_SEED: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub task: Task,
    pub window: usize,
    pub horizon: usize,
    pub stats: NormalizationStats,
    /// Raw values (0 where unobserved).
    pub raw: Array3<f32>,
    pub norm: Array3<f32>,
    /// Ground truth observed.
    pub observed: Array3<bool>,
    /// Observed and not removed by the injected missing pattern.
    pub visible: Array3<bool>,
    pub injected: bool,
    pub time_idx: Vec<(u32, u32)>,
    pub split: Split,
    pub train: Vec<WindowSpec>,
    pub val: Vec<WindowSpec>,
    pub test: Vec<WindowSpec>,
    /// Per (node, channel) mean of visible training values.
    pub node_means: Vec<f64>,
    pub condition_ratio: [f64; 2],
}

/// Everything one step needs: model inputs plus targets in the output layout
/// (B, N, T_out·C).
#[derive(Debug, Clone)]
pub struct HostBatch {
    pub b: usize,
    pub n: usize,
    pub c: usize,
    pub window: usize,
    pub horizon: usize,
    pub x: Vec<f32>,
    pub mask: Vec<f32>,
    pub tod: Vec<u32>,
    pub dow: Vec<u32>,
    pub target: Vec<f32>,
    pub eval: Vec<f32>,
    pub raw_target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Train,
    Eval,
}

impl PreparedData {
    pub fn new(
        ds: &SpatialTemporalDataset,
        task: Task,
        model: &ModelConfig,
        train: &TrainConfig,
        injected: Option<&Array3<bool>>,
    ) -> Result<Self> {
        if ds.channels() != model.channels {
            return Err(crate::error::Error::Config(format!(
                "dataset has {} channels, model expects {}",
                ds.channels(),
                model.channels
            )));
        }
        let (window, horizon) = (model.window, model.horizon);
        let span = match task {
            Task::Forecast => window + horizon,
            Task::Impute => window,
        };
        let split = split_6_2_2(ds.len(), span)?;
        let visible = match injected {
            Some(m) => {
                if m.dim() != ds.data.dim() {
                    return Err(invalid!("mask shape {:?} does not match data {:?}", m.dim(), ds.data.dim()));
                }
                Zip::from(&ds.observed).and(m).map_collect(|&o, &v| o && v)
            }
            None => ds.observed.clone(),
        };
        let stats = NormalizationStats::fit(ds.data.view(), visible.view(), split.train.clone())?;
        let norm = stats.normalize(&ds.data);
        let eval_stride = match task {
            Task::Forecast => 1,
            Task::Impute => window,
        };
        let mut train_w = make_windows(split.train.clone(), task, window, horizon, train.stride);
        if let Some(r) = train.few_shot_ratio {
            train_w = first_fraction(&train_w, r);
        }
        if train_w.is_empty() {
            return Err(invalid!("training range yields no windows"));
        }
        let val = make_windows(split.val.clone(), task, window, horizon, eval_stride);
        let test = make_windows(split.test.clone(), task, window, horizon, eval_stride);
        let (_, n, c) = ds.data.dim();
        let mut sums = vec![(0.0f64, 0usize); n * c];
        for t in split.train.clone() {
            for i in 0..n {
                for ch in 0..c {
                    if visible[[t, i, ch]] {
                        let e = &mut sums[i * c + ch];
                        e.0 += ds.data[[t, i, ch]] as f64;
                        e.1 += 1;
                    }
                }
            }
        }
        let node_means = sums
            .iter()
            .enumerate()
            .map(|(k, &(s, cnt))| if cnt > 0 { s / cnt as f64 } else { stats.mean[k % c] })
            .collect();
        Ok(Self {
            task,
            window,
            horizon,
            stats,
            raw: ds.data.clone(),
            norm,
            observed: ds.observed.clone(),
            visible,
            injected: injected.is_some(),
            time_idx: ds.time_indices()?,
            split,
            train: train_w,
            val,
            test,
            node_means,
            condition_ratio: train.condition_ratio,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.dim().1
    }

    pub fn channels(&self) -> usize {
        self.raw.dim().2
    }

    /// Model mask and evaluation mask (both T_in x N x C, already sliced).
    fn masks(&self, spec: &WindowSpec, purpose: Purpose, rng: &mut ChaCha8Rng) -> Result<(Array3<bool>, Array3<bool>)> {
        let w = self.window;
        let visible = self.visible.slice(ndarray::s![spec.input_start..spec.input_start + w, .., ..]).to_owned();
        match self.task {
            Task::Forecast => {
                let h = self.horizon;
                let eval = self
                    .observed
                    .slice(ndarray::s![spec.target_start..spec.target_start + h, .., ..])
                    .to_owned();
                Ok((visible, eval))
            }
            Task::Impute => match purpose {
                Purpose::Train => {
                    if !visible.iter().any(|&v| v) {
                        return Ok((visible.clone(), Array3::from_elem(visible.dim(), false)));
                    }
                    condition_missing(&visible, self.condition_ratio, rng)
                }
                Purpose::Eval if self.injected => {
                    let observed = self.observed.slice(ndarray::s![spec.input_start..spec.input_start + w, .., ..]);
                    let eval = Zip::from(&observed).and(&visible).map_collect(|&o, &v| o && !v);
                    Ok((visible, eval))
                }
                Purpose::Eval => {
                    if !visible.iter().any(|&v| v) {
                        return Ok((visible.clone(), Array3::from_elem(visible.dim(), false)));
                    }
                    let mut r = ChaCha8Rng::seed_from_u64(EVAL_CONDITION_SEED ^ spec.input_start as u64);
                    condition_missing(&visible, self.condition_ratio, &mut r)
                }
            },
        }
    }

    pub fn assemble(&self, specs: &[WindowSpec], purpose: Purpose, rng: &mut ChaCha8Rng) -> Result<HostBatch> {
        let (b, w, h) = (specs.len(), self.window, self.horizon);
        let (n, c) = (self.n_nodes(), self.channels());
        let mut hb = HostBatch {
            b,
            n,
            c,
            window: w,
            horizon: h,
            x: Vec::with_capacity(b * w * n * c),
            mask: Vec::with_capacity(b * w * n * c),
            tod: Vec::with_capacity(b * w),
            dow: Vec::with_capacity(b * w),
            target: vec![0.0; b * n * h * c],
            eval: vec![0.0; b * n * h * c],
            raw_target: vec![0.0; b * n * h * c],
        };
        for (bi, spec) in specs.iter().enumerate() {
            let (model_mask, eval_mask) = self.masks(spec, purpose, rng)?;
            for t in 0..w {
                let ts = spec.input_start + t;
                let (tod, dow) = self.time_idx[ts];
                hb.tod.push(tod);
                hb.dow.push(dow);
                for i in 0..n {
                    for ch in 0..c {
                        let m = model_mask[[t, i, ch]];
                        hb.x.push(if m { self.norm[[ts, i, ch]] } else { 0.0 });
                        hb.mask.push(if m { 1.0 } else { 0.0 });
                    }
                }
            }
            for t in 0..h {
                let ts = spec.target_start + t;
                for i in 0..n {
                    for ch in 0..c {
                        let k = bi * n * h * c + i * h * c + t * c + ch;
                        hb.target[k] = self.norm[[ts, i, ch]];
                        hb.raw_target[k] = self.raw[[ts, i, ch]] as f64;
                        hb.eval[k] = if eval_mask[[t, i, ch]] { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        Ok(hb)
    }
}

impl HostBatch {
    pub fn to_device(&self, device: &Device, dtype: DType) -> Result<(Batch, Tensor, Tensor)> {
        let (b, w, n, c, h) = (self.b, self.window, self.n, self.c, self.horizon);
        let f = |v: &[f32], shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_slice(v, shape, device)?.to_dtype(dtype)?)
        };
        let batch = Batch {
            x: f(&self.x, &[b, w, n, c])?,
            mask: f(&self.mask, &[b, w, n, c])?,
            tod: Tensor::from_slice(&self.tod, (b, w), device)?,
            dow: Tensor::from_slice(&self.dow, (b, w), device)?,
        };
        Ok((batch, f(&self.target, &[b, n, h * c])?, f(&self.eval, &[b, n, h * c])?))
    }

    pub fn eval_count(&self) -> usize {
        self.eval.iter().filter(|&&e| e > 0.0).count()
    }

    /// Channel of flat output index `k`.
    pub fn channel_of(&self, k: usize) -> usize {
        k % self.c
    }

    /// Node of flat output index `k`.
    pub fn node_of(&self, k: usize) -> usize {
        (k / (self.horizon * self.c)) % self.n
    }

    /// Last visible input value of (batch, node, channel) in normalized units.
    pub fn last_visible(&self, bi: usize, node: usize, ch: usize) -> Option<f32> {
        (0..self.window).rev().find_map(|t| {
            let k = ((bi * self.window + t) * self.n + node) * self.c + ch;
            (self.mask[k] > 0.0).then_some(self.x[k])
        })
    }
}
