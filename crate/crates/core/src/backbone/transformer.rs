use candle_core::{Device, Tensor};

use super::lora::AdaptedLinear;
use super::SequenceBackbone;
use crate::error::{structural, Result};
use crate::nn::{scaled_dot_attention_masked, LayerNorm, Linear};

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub(crate) c_attn: AdaptedLinear,
    pub(crate) c_proj: AdaptedLinear,
    pub(crate) heads: usize,
    pub(crate) causal: bool,
}

impl SelfAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let h = self.heads;
        let qkv = self.c_attn.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * d, d)?
                .reshape((b, l, h, d / h))?
                .transpose(1, 2)?)
        };
        let mask = if self.causal {
            Some(causal_mask(l, x.device(), x.dtype())?)
        } else {
            None
        };
        let (out, _) = scaled_dot_attention_masked(&split(0)?, &split(1)?, &split(2)?, mask.as_ref())?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, l, d))?;
        self.c_proj.forward(&out)
    }
}

fn causal_mask(l: usize, device: &Device, dtype: candle_core::DType) -> Result<Tensor> {
    let vals: Vec<f64> = (0..l)
        .flat_map(|i| (0..l).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(vals, (l, l), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub(crate) c_fc: Linear,
    pub(crate) c_proj: Linear,
}

/// Pre-norm residual block: `x + attn(ln_1(x))`, then `x + mlp(ln_2(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub(crate) ln_1: LayerNorm,
    pub(crate) attn: SelfAttention,
    pub(crate) ln_2: LayerNorm,
    pub(crate) mlp: FeedForward,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln_1.forward(x)?)?)?;
        let hidden = self.mlp.c_fc.forward(&self.ln_2.forward(&x)?)?;
        let hidden = crate::ops::gelu(&hidden)?;
        Ok((&x + self.mlp.c_proj.forward(&hidden)?)?)
    }
}

/// Learned position embeddings, a stack of blocks and a final LayerNorm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub(crate) wpe: Tensor,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_f: LayerNorm,
    pub(crate) width: usize,
}

impl SequenceBackbone for TransformerStack {
    fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, l, d) = tokens.dims3()?;
        if d != self.width {
            return Err(structural!("tokens have width {d}, backbone expects {}", self.width));
        }
        let max = self.wpe.dims()[0];
        if l > max {
            return Err(structural!("sequence of {l} tokens exceeds {max} positions"));
        }
        let mut h = tokens.broadcast_add(&self.wpe.narrow(0, 0, l)?)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        self.ln_f.forward(&h)
    }

    fn width(&self) -> usize {
        self.width
    }

    fn depth(&self) -> usize {
        self.blocks.len()
    }
}
