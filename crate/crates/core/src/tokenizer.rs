//! Spatial and temporal tokenizers.
//!
//! Both fold the time axis into the feature axis. Inputs are batched:
//! `x`, `mask` are (B, T, N, C), the time embedding is (B, T, 2·d_t) since it
//! does not vary across nodes, and the node embedding is (N, d_n).

use candle_core::{Tensor, D};
use ndarray::Array3;

use crate::config::ModelConfig;
use crate::error::{invalid, structural, Result};
use crate::nn::{LayerNorm, Mlp, ParamGroup, ParamStore};

/// Replaces unobserved entries with 0 (the training mean in z-scored units).
pub fn fill_missing(x: &Array3<f32>, observed: &Array3<bool>) -> Result<Array3<f32>> {
    if x.shape() != observed.shape() {
        return Err(structural!(
            "data shape {:?} does not match mask shape {:?}",
            x.shape(),
            observed.shape()
        ));
    }
    let mut out = x.clone();
    out.zip_mut_with(observed, |v, m| {
        if !*m {
            *v = 0.0;
        }
    });
    Ok(out)
}

fn check_window(x: &Tensor, window: usize, channels: usize) -> Result<(usize, usize)> {
    let dims = x.dims();
    if dims.len() != 4 {
        return Err(structural!("expected (B, T, N, C) input, got {dims:?}"));
    }
    if dims[1] != window {
        return Err(structural!("window has {} steps, model expects {window}", dims[1]));
    }
    if dims[3] != channels {
        return Err(structural!("input has {} channels, model expects {channels}", dims[3]));
    }
    Ok((dims[0], dims[2]))
}

/// Node-level spatial tokens: `LayerNorm(MLP_dyn(x) + MLP_int(E_T || E_N) + MLP_mask(M))`.
#[derive(Debug, Clone)]
pub struct SpatialTokenizer {
    intrinsic: Mlp,
    dynamic: Mlp,
    mask: Mlp,
    norm: LayerNorm,
    window: usize,
    channels: usize,
}

impl SpatialTokenizer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let t = cfg.window;
        let d = cfg.d_plm;
        // The node embedding is constant over time, so one copy carries the
        // same information as T broadcast copies.
        let intrinsic_in = t * 2 * cfg.d_t + cfg.d_n;
        Ok(Self {
            intrinsic: Mlp::new(store, "tokenizer.spatial.intrinsic", intrinsic_in, d, d)?,
            dynamic: Mlp::new(store, "tokenizer.spatial.dynamic", t * cfg.channels, d, d)?,
            mask: Mlp::new(store, "tokenizer.spatial.mask", t * cfg.channels, d, d)?,
            norm: LayerNorm::new(store, "tokenizer.spatial.norm", d, cfg.ln_eps, ParamGroup::Trainable)?,
            window: t,
            channels: cfg.channels,
        })
    }

    /// Returns (B, N, d_plm).
    pub fn forward(&self, x: &Tensor, mask: &Tensor, time_emb: &Tensor, node_emb: &Tensor) -> Result<Tensor> {
        let (b, n) = check_window(x, self.window, self.channels)?;
        if mask.dims() != x.dims() {
            return Err(structural!("mask {:?} does not match data {:?}", mask.dims(), x.dims()));
        }
        if node_emb.dims()[0] != n {
            return Err(structural!(
                "node embedding has {} rows for {n} nodes",
                node_emb.dims()[0]
            ));
        }
        let per_node = |t: &Tensor| -> Result<Tensor> {
            Ok(t.permute((0, 2, 1, 3))?.contiguous()?.reshape((b, n, self.window * self.channels))?)
        };
        let dynamic = self.dynamic.forward(&per_node(x)?)?;
        let masked = self.mask.forward(&per_node(mask)?)?;

        // First intrinsic layer on (E_T || E_N), split by input rows so the
        // time part is computed once per sample and the node part once per node.
        let te = time_emb.flatten_from(1)?;
        let te_w = te.dims()[1];
        let d_n = node_emb.dims()[1];
        let fc1 = &self.intrinsic.fc1;
        let from_time = te.matmul(&fc1.weight().narrow(0, 0, te_w)?)?;
        let from_node = node_emb.matmul(&fc1.weight().narrow(0, te_w, d_n)?)?;
        let mut h = from_time.unsqueeze(1)?.broadcast_add(&from_node.unsqueeze(0)?)?;
        if let Some(bias) = fc1.bias() {
            h = crate::ops::add_bias(&h, bias)?;
        }
        let intrinsic = self.intrinsic.fc2.forward(&h.relu()?)?;

        self.norm.forward(&((dynamic + intrinsic)? + masked)?)
    }
}

/// Two system-level tokens: overall state and overall trend, in that order.
#[derive(Debug, Clone)]
pub struct TemporalTokenizer {
    state: Mlp,
    trend: Mlp,
    norm: LayerNorm,
    window: usize,
    channels: usize,
}

impl TemporalTokenizer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let t = cfg.window;
        let c = cfg.channels;
        let d = cfg.d_plm;
        let te = 2 * cfg.d_t;
        Ok(Self {
            state: Mlp::new(store, "tokenizer.temporal.state", t * c + te, d, d)?,
            trend: Mlp::new(store, "tokenizer.temporal.trend", (t - 1) * c + te, d, d)?,
            norm: LayerNorm::new(store, "tokenizer.temporal.norm", d, cfg.ln_eps, ParamGroup::Trainable)?,
            window: t,
            channels: c,
        })
    }

    /// Node-mean series (B, T·C) and its first difference (B, (T-1)·C).
    pub fn summaries(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, _) = check_window(x, self.window, self.channels)?;
        if self.window < 2 {
            return Err(invalid!("trend token needs at least two time steps"));
        }
        let mean = x.mean(2)?; // (B, T, C)
        let t = self.window;
        let diff = (mean.narrow(1, 1, t - 1)? - mean.narrow(1, 0, t - 1)?)?;
        Ok((
            mean.reshape((b, t * self.channels))?,
            diff.reshape((b, (t - 1) * self.channels))?,
        ))
    }

    /// Returns (B, 2, d_plm).
    pub fn forward(&self, x: &Tensor, time_emb: &Tensor) -> Result<Tensor> {
        let (mean, trend) = self.summaries(x)?;
        let last = time_emb.narrow(1, self.window - 1, 1)?.squeeze(1)?;
        let state = self.state.forward(&Tensor::cat(&[&mean, &last], D::Minus1)?)?;
        let trend = self.trend.forward(&Tensor::cat(&[&trend, &last], D::Minus1)?)?;
        self.norm.forward(&Tensor::stack(&[&state, &trend], 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            window: 3,
            horizon: 3,
            channels: 1,
            d_t: 2,
            d_n: 3,
            k: 4,
            m: 2,
            d_h: 4,
            d_plm: 8,
            ..ModelConfig::default()
        }
    }

    fn store() -> ParamStore {
        ParamStore::new(Device::Cpu, DType::F64, ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn fill_missing_cases() {
        let x = Array3::from_shape_fn((2, 2, 1), |(t, n, _)| (t * 2 + n) as f32 + 1.0);
        let all = Array3::from_elem((2, 2, 1), true);
        assert_eq!(fill_missing(&x, &all).unwrap(), x);
        let none = Array3::from_elem((2, 2, 1), false);
        assert!(fill_missing(&x, &none).unwrap().iter().all(|v| *v == 0.0));
        let mut one = all.clone();
        one[[1, 0, 0]] = false;
        let f = fill_missing(&x, &one).unwrap();
        assert_eq!(f[[1, 0, 0]], 0.0);
        assert_eq!(f.iter().filter(|v| **v == 0.0).count(), 1);
    }

    #[test]
    fn trend_of_node_mean() {
        let mut s = store();
        let tok = TemporalTokenizer::new(&mut s, &cfg()).unwrap();
        // Node-mean series (1, 4, 9) from two nodes.
        let x = Tensor::from_vec(vec![0.0f64, 2.0, 3.0, 5.0, 8.0, 10.0], (1, 3, 2, 1), &Device::Cpu).unwrap();
        let (mean, trend) = tok.summaries(&x).unwrap();
        assert_eq!(mean.to_vec2::<f64>().unwrap(), vec![vec![1.0, 4.0, 9.0]]);
        assert_eq!(trend.to_vec2::<f64>().unwrap(), vec![vec![3.0, 5.0]]);
    }

    #[test]
    fn constant_series_has_zero_trend() {
        let mut s = store();
        let tok = TemporalTokenizer::new(&mut s, &cfg()).unwrap();
        let x = Tensor::full(2.5f64, (1, 3, 4, 1), &Device::Cpu).unwrap();
        let (mean, trend) = tok.summaries(&x).unwrap();
        assert!(trend.to_vec2::<f64>().unwrap()[0].iter().all(|v| *v == 0.0));
        assert!(mean.to_vec2::<f64>().unwrap()[0].iter().all(|v| *v == 2.5));
    }

    #[test]
    fn wrong_window_is_structural() {
        let mut s = store();
        let tok = TemporalTokenizer::new(&mut s, &cfg()).unwrap();
        let x = Tensor::zeros((1, 4, 2, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(tok.summaries(&x).is_err());
    }

    #[test]
    fn mask_changes_spatial_tokens() {
        let c = cfg();
        let mut s = store();
        let tok = SpatialTokenizer::new(&mut s, &c).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 3, 2, 1), &dev).unwrap();
        let te = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let ne = Tensor::randn(0f64, 1.0, (2, 3), &dev).unwrap();
        let ones = Tensor::ones((1, 3, 2, 1), DType::F64, &dev).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let a = tok.forward(&x, &ones, &te, &ne).unwrap();
        let b = tok.forward(&x, &zeros, &te, &ne).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 1e-6);
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.squeeze(0).unwrap().to_vec2::<f64>().unwrap()
    }

    #[test]
    fn spatial_tokens_are_per_node() {
        let c = cfg();
        let mut s = store();
        let tok = SpatialTokenizer::new(&mut s, &c).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 3, 4, 1), &dev).unwrap();
        let m = Tensor::rand(0f64, 1.0, (1, 3, 4, 1), &dev).unwrap().ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let te = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let ne = Tensor::randn(0f64, 1.0, (4, 3), &dev).unwrap();
        let out = rows(&tok.forward(&x, &m, &te, &ne).unwrap());
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].len(), 8);

        // Nodes 0 and 2 get identical inputs.
        let idx = Tensor::new(&[0u32, 1, 0, 3], &dev).unwrap();
        let same = tok
            .forward(
                &x.index_select(&idx, 2).unwrap(),
                &m.index_select(&idx, 2).unwrap(),
                &te,
                &ne.index_select(&idx, 0).unwrap(),
            )
            .unwrap();
        let same = rows(&same);
        assert_eq!(same[0], same[2]);

        // Relabelling nodes relabels the tokens.
        let perm = [2u32, 0, 3, 1];
        let p = Tensor::new(&perm, &dev).unwrap();
        let permuted = tok
            .forward(
                &x.index_select(&p, 2).unwrap(),
                &m.index_select(&p, 2).unwrap(),
                &te,
                &ne.index_select(&p, 0).unwrap(),
            )
            .unwrap();
        let permuted = rows(&permuted);
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in permuted[i].iter().zip(&out[src as usize]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn row_moments(t: &Tensor) -> Vec<(f64, f64)> {
        let d = t.dims()[t.rank() - 1];
        t.flatten_to(t.rank() - 2)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap()
            .into_iter()
            .map(|r| {
                let mean = r.iter().sum::<f64>() / d as f64;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                (mean, var)
            })
            .collect()
    }

    #[test]
    fn token_rows_are_standardized_at_init() {
        let c = cfg();
        let mut s = store();
        let spatial = SpatialTokenizer::new(&mut s, &c).unwrap();
        let temporal = TemporalTokenizer::new(&mut s, &c).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 2.0, (2, 3, 5, 1), &dev).unwrap();
        let m = x.ones_like().unwrap();
        let te = Tensor::randn(0f64, 1.0, (2, 3, 4), &dev).unwrap();
        let ne = Tensor::randn(0f64, 1.0, (5, 3), &dev).unwrap();
        let rows = row_moments(&spatial.forward(&x, &m, &te, &ne).unwrap())
            .into_iter()
            .chain(row_moments(&temporal.forward(&x, &te).unwrap()));
        for (mean, var) in rows {
            assert!(mean.abs() < 1e-5, "{mean}");
            // eps in the denominator pulls the variance slightly below 1
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn full_mask_gives_the_same_mask_token_everywhere() {
        let c = cfg();
        let mut s = store();
        let tok = SpatialTokenizer::new(&mut s, &c).unwrap();
        let ones = Tensor::ones((2, 3, 4, 1), DType::F64, &Device::Cpu).unwrap();
        let per_node = ones.permute((0, 2, 1, 3)).unwrap().reshape((2, 4, 3)).unwrap();
        let z = tok.mask.forward(&per_node).unwrap().to_vec3::<f64>().unwrap();
        for sample in &z {
            for row in sample {
                assert_eq!(row, &z[0][0]);
            }
        }
    }

    #[test]
    fn temporal_tokens_ignore_node_order() {
        let c = cfg();
        let mut s = store();
        let tok = TemporalTokenizer::new(&mut s, &c).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 3, 4, 1), &dev).unwrap();
        let te = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let p = Tensor::new(&[3u32, 1, 0, 2], &dev).unwrap();
        let a = tok.forward(&x, &te).unwrap();
        let b = tok.forward(&x.index_select(&p, 2).unwrap(), &te).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }
}
