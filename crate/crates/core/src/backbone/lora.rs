use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{matmul_last, Init, Linear, ParamGroup, ParamStore};

/// A projection `x W + b`, optionally with a trainable low-rank update
/// `scale · (x A) B` on top of a frozen base.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    base: Linear,
    adapter: Option<LowRank>,
}

#[derive(Debug, Clone)]
struct LowRank {
    /// in x r
    a: Tensor,
    /// r x out, zero-initialized so the adapted layer starts at the base
    b: Tensor,
    scale: f64,
}

impl AdaptedLinear {
    pub fn plain(base: Linear) -> Self {
        Self { base, adapter: None }
    }

    pub fn with_lora(
        store: &mut ParamStore,
        name: &str,
        base: Linear,
        d_in: usize,
        rank: usize,
        scale: f64,
    ) -> Result<Self> {
        let d_out = base.d_out();
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = store.get(&format!("{name}.lora_a"), &[d_in, rank], Init::Uniform(bound), ParamGroup::Lora)?;
        let b = store.get(&format!("{name}.lora_b"), &[rank, d_out], Init::Zeros, ParamGroup::Lora)?;
        Ok(Self {
            base,
            adapter: Some(LowRank { a, b, scale }),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            None => Ok(y),
            Some(lr) => {
                let delta = matmul_last(&matmul_last(x, &lr.a)?, &lr.b)?;
                Ok((y + delta.affine(lr.scale, 0.0)?)?)
            }
        }
    }
}
