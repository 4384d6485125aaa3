//! GPT-2 checkpoint loading.
//!
//! Checkpoint names are mapped onto internal parameter names through
//! [`WEIGHT_MAP`]; `{i}` stands for the block index. Bump
//! [`WEIGHT_MAP_VERSION`] whenever the table changes.
//!
//! | checkpoint name          | internal name                         |
//! |--------------------------|---------------------------------------|
//! | `wte.weight`             | `backbone.wte.weight`                 |
//! | `wpe.weight`             | `backbone.wpe.weight`                 |
//! | `h.{i}.ln_1.{weight,bias}` | `backbone.h.{i}.ln_1.{weight,bias}` |
//! | `h.{i}.attn.c_attn.*`    | `backbone.h.{i}.attn.c_attn.*`        |
//! | `h.{i}.attn.c_proj.*`    | `backbone.h.{i}.attn.c_proj.*`        |
//! | `h.{i}.ln_2.*`           | `backbone.h.{i}.ln_2.*`               |
//! | `h.{i}.mlp.c_fc.*`       | `backbone.h.{i}.mlp.c_fc.*`           |
//! | `h.{i}.mlp.c_proj.*`     | `backbone.h.{i}.mlp.c_proj.*`         |
//! | `ln_f.{weight,bias}`     | `backbone.ln_f.{weight,bias}`         |
//!
//! A leading `transformer.` is stripped. `lm_head.weight`, the attention
//! mask buffers (`h.{i}.attn.bias`, `h.{i}.attn.masked_bias`) and blocks past
//! the requested depth are dropped.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const WEIGHT_MAP_VERSION: u32 = 1;

/// Environment variable naming the directory searched for registry names.
pub const CACHE_DIR_ENV: &str = "STDPLM_PRETRAINED_DIR";

pub const GLOBAL_WEIGHTS: &[(&str, &str)] = &[
    ("wte.weight", "backbone.wte.weight"),
    ("wpe.weight", "backbone.wpe.weight"),
    ("ln_f.weight", "backbone.ln_f.weight"),
    ("ln_f.bias", "backbone.ln_f.bias"),
];

pub const WEIGHT_MAP: &[(&str, &str)] = &[
    ("h.{i}.ln_1.weight", "backbone.h.{i}.ln_1.weight"),
    ("h.{i}.ln_1.bias", "backbone.h.{i}.ln_1.bias"),
    ("h.{i}.attn.c_attn.weight", "backbone.h.{i}.attn.c_attn.weight"),
    ("h.{i}.attn.c_attn.bias", "backbone.h.{i}.attn.c_attn.bias"),
    ("h.{i}.attn.c_proj.weight", "backbone.h.{i}.attn.c_proj.weight"),
    ("h.{i}.attn.c_proj.bias", "backbone.h.{i}.attn.c_proj.bias"),
    ("h.{i}.ln_2.weight", "backbone.h.{i}.ln_2.weight"),
    ("h.{i}.ln_2.bias", "backbone.h.{i}.ln_2.bias"),
    ("h.{i}.mlp.c_fc.weight", "backbone.h.{i}.mlp.c_fc.weight"),
    ("h.{i}.mlp.c_fc.bias", "backbone.h.{i}.mlp.c_fc.bias"),
    ("h.{i}.mlp.c_proj.weight", "backbone.h.{i}.mlp.c_proj.weight"),
    ("h.{i}.mlp.c_proj.bias", "backbone.h.{i}.mlp.c_proj.bias"),
];

/// Resolves a checkpoint locator: an existing file, a directory containing
/// `model.safetensors`, or a name looked up under the cache directory.
pub fn resolve_locator(locator: &str) -> Result<PathBuf> {
    let direct = Path::new(locator);
    if direct.is_file() {
        return Ok(direct.to_path_buf());
    }
    if direct.is_dir() {
        return Ok(direct.join("model.safetensors"));
    }
    let root = std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache/stdplm")))
        .unwrap_or_else(|| PathBuf::from(".cache/stdplm"));
    let candidate = root.join(locator).join("model.safetensors");
    if candidate.is_file() {
        Ok(candidate)
    } else {
        Err(Error::Config(format!(
            "pretrained checkpoint `{locator}` not found (looked for {}); place a GPT-2 \
             safetensors file there, set {CACHE_DIR_ENV}, or use a scratch backbone",
            candidate.display()
        )))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| {
        Error::Format(format!("cannot read checkpoint {}: {e}", path.display()))
    })
}

fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("h.")?.split('.').next()?.parse().ok()
}

/// Maps checkpoint tensors to internal names for the first `layers` blocks.
pub fn map_weights(raw: HashMap<String, Tensor>, layers: usize) -> Result<HashMap<String, Tensor>> {
    let mut expected: HashMap<String, String> = GLOBAL_WEIGHTS
        .iter()
        .map(|(c, i)| (c.to_string(), i.to_string()))
        .collect();
    for i in 0..layers {
        for (c, n) in WEIGHT_MAP {
            let i = i.to_string();
            expected.insert(c.replace("{i}", &i), n.replace("{i}", &i));
        }
    }

    let mut mapped = HashMap::new();
    let mut unmatched = BTreeSet::new();
    for (name, tensor) in raw {
        let short = name.strip_prefix("transformer.").unwrap_or(&name).to_string();
        if short == "lm_head.weight" || short.ends_with(".attn.bias") || short.ends_with(".attn.masked_bias") {
            continue;
        }
        if let Some(internal) = expected.get(&short) {
            mapped.insert(internal.clone(), tensor);
        } else if block_index(&short).is_some_and(|i| i >= layers)
            && WEIGHT_MAP.iter().any(|(c, _)| c.replace("{i}", &block_index(&short).unwrap().to_string()) == short)
        {
            continue;
        } else {
            unmatched.insert(name);
        }
    }
    let missing: BTreeSet<String> = expected
        .iter()
        .filter(|(_, internal)| !mapped.contains_key(*internal))
        .map(|(c, _)| c.clone())
        .collect();
    if !missing.is_empty() || !unmatched.is_empty() {
        return Err(Error::Mapping {
            missing: missing.into_iter().collect(),
            unmatched: unmatched.into_iter().collect(),
        });
    }
    Ok(mapped)
}

/// Dimensions of a GPT-2-layout checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gpt2Shape {
    pub vocab: usize,
    pub n_positions: usize,
    pub width: usize,
    pub layers: usize,
}

impl Gpt2Shape {
    /// The 124M-parameter GPT-2 truncated to `layers` blocks.
    pub fn small(layers: usize) -> Self {
        Self {
            vocab: 50_257,
            n_positions: 1024,
            width: 768,
            layers,
        }
    }
}

/// Randomly initialized weights in the GPT-2 checkpoint layout (N(0, 0.02)
/// matrices, zero biases, unit LayerNorm gains). Useful where the released
/// weights are not available; shapes and names match exactly.
pub fn random_checkpoint(shape: Gpt2Shape, seed: u64) -> Result<HashMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).map_err(|e| Error::Config(e.to_string()))?;
    let mut randn = |dims: &[usize]| -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let v: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Ok(Tensor::from_vec(v, dims, &Device::Cpu)?)
    };
    let d = shape.width;
    let zeros = |n: usize| Tensor::zeros(n, DType::F32, &Device::Cpu);
    let ones = |n: usize| Tensor::ones(n, DType::F32, &Device::Cpu);
    let mut w = HashMap::new();
    w.insert("wte.weight".into(), randn(&[shape.vocab, d])?);
    w.insert("wpe.weight".into(), randn(&[shape.n_positions, d])?);
    for i in 0..shape.layers {
        let p = |s: &str| format!("h.{i}.{s}");
        w.insert(p("ln_1.weight"), ones(d)?);
        w.insert(p("ln_1.bias"), zeros(d)?);
        w.insert(p("attn.c_attn.weight"), randn(&[d, 3 * d])?);
        w.insert(p("attn.c_attn.bias"), zeros(3 * d)?);
        w.insert(p("attn.c_proj.weight"), randn(&[d, d])?);
        w.insert(p("attn.c_proj.bias"), zeros(d)?);
        w.insert(p("ln_2.weight"), ones(d)?);
        w.insert(p("ln_2.bias"), zeros(d)?);
        w.insert(p("mlp.c_fc.weight"), randn(&[d, 4 * d])?);
        w.insert(p("mlp.c_fc.bias"), zeros(4 * d)?);
        w.insert(p("mlp.c_proj.weight"), randn(&[4 * d, d])?);
        w.insert(p("mlp.c_proj.bias"), zeros(d)?);
    }
    w.insert("ln_f.weight".into(), ones(d)?);
    w.insert("ln_f.bias".into(), zeros(d)?);
    Ok(w)
}

pub fn write_checkpoint(weights: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    candle_core::safetensors::save(weights, path).map_err(|e| match e {
        candle_core::Error::Io(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::Tensor(other),
    })
}
