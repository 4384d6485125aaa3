//! Sandglass attention: N node tokens are squeezed into M region tokens by
//! learnable queries (precoder), and backbone outputs are expanded back to N
//! nodes with the node tokens as queries (decoder).
//!
//! Queries and keys are projected to width `d_h`; values keep width `d_plm`.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::error::{structural, Result};
use crate::nn::{scaled_dot_attention, Init, LayerNorm, Linear, ParamGroup, ParamStore};

#[derive(Debug, Clone)]
pub struct SandglassAttention {
    /// H_l, (M, d_plm)
    queries: Tensor,
    pre_q: Linear,
    pre_k: Linear,
    pre_norm: LayerNorm,
    dec_q: Linear,
    dec_k: Linear,
    dec_norm: LayerNorm,
    heads: usize,
}

impl SandglassAttention {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (d, dh) = (cfg.d_plm, cfg.d_h);
        let group = ParamGroup::Trainable;
        Ok(Self {
            queries: store.get("sga.queries", &[cfg.m, d], Init::Normal(0.02), group)?,
            pre_q: Linear::new(store, "sga.precoder.q", d, dh, group)?,
            pre_k: Linear::new(store, "sga.precoder.k", d, dh, group)?,
            pre_norm: LayerNorm::new(store, "sga.precoder.norm", d, cfg.ln_eps, group)?,
            dec_q: Linear::new(store, "sga.decoder.q", d, dh, group)?,
            dec_k: Linear::new(store, "sga.decoder.k", d, dh, group)?,
            dec_norm: LayerNorm::new(store, "sga.decoder.norm", d, cfg.ln_eps, group)?,
            heads: cfg.sga_heads,
        })
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    pub fn n_regions(&self) -> usize {
        self.queries.dims()[0]
    }

    /// (B, L, W) -> (B, heads, L, W / heads)
    fn split(&self, t: &Tensor) -> Result<Tensor> {
        let (b, l, w) = t.dims3()?;
        Ok(t.reshape((b, l, self.heads, w / self.heads))?.transpose(1, 2)?)
    }

    fn merge(&self, t: &Tensor) -> Result<Tensor> {
        let (b, h, l, w) = t.dims4()?;
        Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, l, h * w))?)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.heads == 1 {
            return scaled_dot_attention(q, k, v);
        }
        let (out, w) = scaled_dot_attention(&self.split(q)?, &self.split(k)?, &self.split(v)?)?;
        Ok((self.merge(&out)?, w.mean(1)?))
    }

    /// Node tokens (B, N, d) -> region tokens (B, M, d) and weights S (B, M, N).
    pub fn precode(&self, z_s: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, _, d) = z_s.dims3()?;
        if d != self.queries.dims()[1] {
            return Err(structural!("node tokens have width {d}, queries {}", self.queries.dims()[1]));
        }
        let q = self.pre_q.forward(&self.queries)?;
        let q = q.unsqueeze(0)?.broadcast_as((b, q.dims()[0], q.dims()[1]))?;
        let k = self.pre_k.forward(z_s)?;
        let (out, s) = self.attend(&q, &k, z_s)?;
        Ok((self.pre_norm.forward(&out)?, s))
    }

    /// Backbone outputs for the region tokens (B, M, d) -> node representations (B, N, d).
    pub fn decode(&self, z_s: &Tensor, z_h_out: &Tensor) -> Result<Tensor> {
        let (b, m, d) = z_h_out.dims3()?;
        if m != self.n_regions() || d != self.queries.dims()[1] {
            return Err(structural!(
                "decoder expects ({}, {}) region states, got ({m}, {d})",
                self.n_regions(),
                self.queries.dims()[1]
            ));
        }
        let q = self.dec_q.forward(z_s)?;
        let k = self.dec_k.forward(&self.queries)?;
        let k = k.unsqueeze(0)?.broadcast_as((b, k.dims()[0], k.dims()[1]))?;
        let (out, _) = self.attend(&q, &k, z_h_out)?;
        self.dec_norm.forward(&out)
    }
}

/// Standard single-head self-attention over all N tokens with d x d
/// projections; the dense baseline the sandglass module replaces.
#[derive(Debug, Clone)]
pub struct FullSelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    norm: LayerNorm,
}

impl FullSelfAttention {
    pub fn new(store: &mut ParamStore, d: usize, eps: f64) -> Result<Self> {
        let g = ParamGroup::Trainable;
        Ok(Self {
            q: Linear::new(store, "full.q", d, d, g)?,
            k: Linear::new(store, "full.k", d, d, g)?,
            v: Linear::new(store, "full.v", d, d, g)?,
            norm: LayerNorm::new(store, "full.norm", d, eps, g)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out, _) = scaled_dot_attention(&self.q.forward(x)?, &self.k.forward(x)?, &self.v.forward(x)?)?;
        self.norm.forward(&out)
    }
}

/// Row sums of S; every entry should be 1.
pub fn row_sums(s: &Tensor) -> Result<Tensor> {
    Ok(s.sum(D::Minus1)?)
}
