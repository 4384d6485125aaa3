//! Sequence backbones: a partially fine-tuned GPT-2-class stack, or a
//! bidirectional encoder of the same depth and width trained from scratch.

pub mod gpt2;
mod lora;
mod transformer;

use std::collections::HashMap;

use candle_core::Tensor;

pub use lora::AdaptedLinear;
pub use transformer::TransformerStack;
use transformer::{Block, FeedForward, SelfAttention};

use crate::config::{BackboneKind, ModelConfig};
use crate::error::{structural, Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamGroup, ParamReport, ParamStore};

/// Maps an (L, d) token sequence to an (L, d) hidden sequence, batched.
pub trait SequenceBackbone: std::fmt::Debug + Send + Sync {
    fn forward(&self, tokens: &Tensor) -> Result<Tensor>;
    fn width(&self) -> usize;
    fn depth(&self) -> usize;
}

/// Which pretrained parameters are adapted, fully trained, or frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunePolicy {
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Projections that receive low-rank adapters.
    pub lora_targets: Vec<String>,
    /// Name fragments whose parameters are updated in full.
    pub fully_trainable: Vec<String>,
}

impl FinetunePolicy {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            lora_rank: cfg.backbone.lora_rank,
            lora_scale: cfg.backbone.lora_scale(),
            lora_targets: vec!["attn.c_attn".into(), "attn.c_proj".into()],
            fully_trainable: vec![".wpe.".into(), ".ln_1.".into(), ".ln_2.".into(), ".ln_f.".into()],
        }
    }

    pub fn group_for(&self, internal_name: &str) -> ParamGroup {
        if self.fully_trainable.iter().any(|f| internal_name.contains(f.as_str())) {
            ParamGroup::Trainable
        } else {
            ParamGroup::Frozen
        }
    }

    fn adapts(&self, prefix: &str) -> bool {
        self.lora_rank > 0 && self.lora_targets.iter().any(|t| prefix.ends_with(t.as_str()))
    }
}

/// Parameter counts restricted to names under `prefix`.
pub fn partition_report(store: &ParamStore, prefix: &str) -> ParamReport {
    let mut r = ParamReport::default();
    for name in store.names().filter(|n| n.starts_with(prefix)) {
        let n = store.tensor(name).map(|t| t.elem_count()).unwrap_or(0);
        r.total += n;
        match store.group(name) {
            Some(ParamGroup::Frozen) => r.frozen += n,
            Some(ParamGroup::Lora) => r.lora += n,
            Some(ParamGroup::Trainable) => r.fully_trainable += n,
            None => {}
        }
    }
    r.trainable = r.lora + r.fully_trainable;
    r
}

pub fn build(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Box<dyn SequenceBackbone>> {
    Ok(match cfg.backbone.kind {
        BackboneKind::Scratch => Box::new(scratch_encoder(store, cfg)?),
        BackboneKind::Pretrained => Box::new(load_pretrained(store, cfg)?),
    })
}

/// Resolves `cfg.backbone.checkpoint` and loads its first `cfg.layers` blocks.
pub fn load_pretrained(store: &mut ParamStore, cfg: &ModelConfig) -> Result<TransformerStack> {
    let path = gpt2::resolve_locator(&cfg.backbone.checkpoint)?;
    let raw = gpt2::read_checkpoint(&path)?;
    pretrained_from_weights(store, raw, cfg, &FinetunePolicy::from_config(cfg))
}

/// Builds the pretrained stack from checkpoint tensors and applies the
/// fine-tuning policy. The token embedding is kept (frozen) but unused; the
/// language-model head is discarded.
pub fn pretrained_from_weights(
    store: &mut ParamStore,
    raw: HashMap<String, Tensor>,
    cfg: &ModelConfig,
    policy: &FinetunePolicy,
) -> Result<TransformerStack> {
    let mut mapped = gpt2::map_weights(raw, cfg.layers)?;
    let width = mapped["backbone.wpe.weight"].dims()[1];
    if width != cfg.d_plm {
        return Err(Error::Config(format!(
            "checkpoint width {width} does not match d_plm = {}",
            cfg.d_plm
        )));
    }
    let d = width;
    let hidden = if cfg.layers > 0 {
        mapped["backbone.h.0.mlp.c_fc.weight"].dims()[1]
    } else {
        4 * d
    };
    let expect = |name: &str, dims: &[usize], mapped: &HashMap<String, Tensor>| -> Result<()> {
        let got = mapped[name].dims();
        if got != dims {
            return Err(structural!("checkpoint tensor `{name}` has shape {got:?}, expected {dims:?}"));
        }
        Ok(())
    };

    let positions = mapped["backbone.wpe.weight"].dims()[0];
    if positions < cfg.sequence_len() {
        return Err(Error::Config(format!(
            "checkpoint has {positions} positions, model needs {}",
            cfg.sequence_len()
        )));
    }
    for i in 0..cfg.layers {
        let p = format!("backbone.h.{i}");
        for (suffix, dims) in [
            ("attn.c_attn.weight", vec![d, 3 * d]),
            ("attn.c_proj.weight", vec![d, d]),
            ("mlp.c_fc.weight", vec![d, hidden]),
            ("mlp.c_proj.weight", vec![hidden, d]),
        ] {
            expect(&format!("{p}.{suffix}"), &dims, &mapped)?;
        }
    }

    let mut take = |name: &str, store: &mut ParamStore| -> Result<Tensor> {
        let t = mapped
            .remove(name)
            .ok_or_else(|| structural!("checkpoint tensor `{name}` consumed twice"))?;
        store.insert(name, t, policy.group_for(name))
    };

    take("backbone.wte.weight", store)?;
    let wpe = take("backbone.wpe.weight", store)?;

    let mut blocks = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let p = format!("backbone.h.{i}");
        let ln = |which: &str, store: &mut ParamStore, take: &mut dyn FnMut(&str, &mut ParamStore) -> Result<Tensor>| -> Result<LayerNorm> {
            let w = take(&format!("{p}.{which}.weight"), store)?;
            let b = take(&format!("{p}.{which}.bias"), store)?;
            Ok(LayerNorm::from_tensors(w, b, cfg.ln_eps))
        };
        let ln_1 = ln("ln_1", store, &mut take)?;
        let ln_2 = ln("ln_2", store, &mut take)?;
        let mut proj = |which: &str, store: &mut ParamStore| -> Result<AdaptedLinear> {
            let name = format!("{p}.{which}");
            let base = Linear::from_tensors(
                take(&format!("{name}.weight"), store)?,
                Some(take(&format!("{name}.bias"), store)?),
            );
            if policy.adapts(&name) {
                AdaptedLinear::with_lora(store, &name, base, d, policy.lora_rank, policy.lora_scale)
            } else {
                Ok(AdaptedLinear::plain(base))
            }
        };
        let c_attn = proj("attn.c_attn", store)?;
        let c_proj = proj("attn.c_proj", store)?;
        let mut linear = |which: &str, store: &mut ParamStore| -> Result<Linear> {
            Ok(Linear::from_tensors(
                take(&format!("{p}.{which}.weight"), store)?,
                Some(take(&format!("{p}.{which}.bias"), store)?),
            ))
        };
        let mlp = FeedForward {
            c_fc: linear("mlp.c_fc", store)?,
            c_proj: linear("mlp.c_proj", store)?,
        };
        blocks.push(Block {
            ln_1,
            attn: SelfAttention {
                c_attn,
                c_proj,
                heads: cfg.backbone.heads,
                causal: true,
            },
            ln_2,
            mlp,
        });
    }
    let ln_f = LayerNorm::from_tensors(
        take("backbone.ln_f.weight", store)?,
        take("backbone.ln_f.bias", store)?,
        cfg.ln_eps,
    );
    Ok(TransformerStack {
        wpe,
        blocks,
        ln_f,
        width: d,
    })
}

/// Bidirectional encoder with the same block structure, all parameters trainable.
pub fn scratch_encoder(store: &mut ParamStore, cfg: &ModelConfig) -> Result<TransformerStack> {
    let d = cfg.d_plm;
    let hidden = cfg.backbone.mlp_ratio * d;
    let g = ParamGroup::Trainable;
    let wpe = store.get("backbone.wpe.weight", &[cfg.sequence_len(), d], Init::Normal(0.02), g)?;
    let linear = |store: &mut ParamStore, name: &str, din: usize, dout: usize| -> Result<Linear> {
        Ok(Linear::from_tensors(
            store.get(&format!("{name}.weight"), &[din, dout], Init::Normal(0.02), g)?,
            Some(store.get(&format!("{name}.bias"), &[dout], Init::Zeros, g)?),
        ))
    };
    let mut blocks = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let p = format!("backbone.h.{i}");
        let ln_1 = LayerNorm::new(store, &format!("{p}.ln_1"), d, cfg.ln_eps, g)?;
        let c_attn = AdaptedLinear::plain(linear(store, &format!("{p}.attn.c_attn"), d, 3 * d)?);
        let c_proj = AdaptedLinear::plain(linear(store, &format!("{p}.attn.c_proj"), d, d)?);
        let ln_2 = LayerNorm::new(store, &format!("{p}.ln_2"), d, cfg.ln_eps, g)?;
        let mlp = FeedForward {
            c_fc: linear(store, &format!("{p}.mlp.c_fc"), d, hidden)?,
            c_proj: linear(store, &format!("{p}.mlp.c_proj"), hidden, d)?,
        };
        blocks.push(Block {
            ln_1,
            attn: SelfAttention {
                c_attn,
                c_proj,
                heads: cfg.backbone.heads,
                causal: false,
            },
            ln_2,
            mlp,
        });
    }
    let ln_f = LayerNorm::new(store, "backbone.ln_f", d, cfg.ln_eps, g)?;
    Ok(TransformerStack {
        wpe,
        blocks,
        ln_f,
        width: d,
    })
}
