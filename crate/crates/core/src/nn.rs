//! Parameter registry and small differentiable building blocks.
//!
//! Every parameter lives in a [`ParamStore`] under a dotted name. Frozen
//! parameters are handed to modules as detached tensors, so no gradient is
//! ever computed for them; they still share storage with the stored `Var`
//! and can be reloaded from a checkpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{structural, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Frozen,
    Lora,
    Trainable,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform(-b, b)
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    group: ParamGroup,
}

#[derive(Debug)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
}

/// Per-group parameter counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub lora: usize,
    pub fully_trainable: usize,
}

impl ParamReport {
    pub fn trainable_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }

    /// One row in the `Parameters | Trainable Parameters | Trainable Ratio(%)` layout.
    pub fn table(&self, label: &str) -> String {
        format!(
            "| Method | Parameters | Trainable Parameters | Trainable Ratio(%) |\n\
             |---|---|---|---|\n\
             | {label} | {} | {} | {:.2} |\n",
            self.total,
            self.trainable,
            100.0 * self.trainable_ratio()
        )
    }
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType, rng: ChaCha8Rng) -> Self {
        Self {
            entries: BTreeMap::new(),
            device,
            dtype,
            rng,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Creates and registers a parameter, returning the tensor modules should hold.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init, group: ParamGroup) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(structural!("parameter `{name}` registered twice"));
        }
        let len: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Uniform(b) => (0..len).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..len).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t, group)
    }

    /// Registers an existing tensor (e.g. pretrained weights).
    pub fn insert(&mut self, name: &str, value: Tensor, group: ParamGroup) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(structural!("parameter `{name}` registered twice"));
        }
        let value = value.to_device(&self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&value)?;
        let handle = match group {
            ParamGroup::Frozen => var.as_tensor().detach(),
            _ => var.as_tensor().clone(),
        };
        self.entries.insert(name.to_string(), Entry { var, group });
        Ok(handle)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn group(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|e| e.group)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| e.var.as_tensor())
    }

    /// Variables the optimizer should update.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|e| e.group != ParamGroup::Frozen)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn trainable_named(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group != ParamGroup::Frozen)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn report(&self) -> ParamReport {
        let mut r = ParamReport::default();
        for e in self.entries.values() {
            let n = e.var.elem_count();
            r.total += n;
            match e.group {
                ParamGroup::Frozen => r.frozen += n,
                ParamGroup::Lora => r.lora += n,
                ParamGroup::Trainable => r.fully_trainable += n,
            }
        }
        r.trainable = r.lora + r.fully_trainable;
        r
    }

    /// Deep copy of the current values, keyed by name.
    pub fn snapshot(&self, trainable_only: bool) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (name, e) in &self.entries {
            if trainable_only && e.group == ParamGroup::Frozen {
                continue;
            }
            out.insert(name.clone(), e.var.as_tensor().copy()?);
        }
        Ok(out)
    }

    /// Overwrites parameters in place. Unknown names are a mapping error; when
    /// `require_all` is set, parameters absent from `values` are too.
    pub fn restore(&self, values: &HashMap<String, Tensor>, require_all: bool) -> Result<()> {
        let unmatched: Vec<String> = values
            .keys()
            .filter(|k| !self.entries.contains_key(*k))
            .cloned()
            .collect();
        let missing: Vec<String> = if require_all {
            self.entries
                .keys()
                .filter(|k| !values.contains_key(*k))
                .cloned()
                .collect()
        } else {
            Vec::new()
        };
        if !unmatched.is_empty() || !missing.is_empty() {
            return Err(Error::Mapping { missing, unmatched });
        }
        for (name, value) in values {
            let e = &self.entries[name];
            if e.var.shape() != value.shape() {
                return Err(structural!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    e.var.dims(),
                    value.dims()
                ));
            }
            e.var
                .set(&value.to_device(&self.device)?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Writes parameters plus `extra` tensors as safetensors.
    pub fn save(&self, path: &Path, trainable_only: bool, extra: &HashMap<String, Tensor>) -> Result<()> {
        let mut all = self.snapshot(trainable_only)?;
        for (k, v) in extra {
            all.insert(k.clone(), v.clone());
        }
        candle_core::safetensors::save(&all, path).map_err(|e| match e {
            candle_core::Error::Io(io) => Error::io(format!("writing {}", path.display()), io),
            other => Error::Tensor(other),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// in x out
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// PyTorch-style Uniform(±1/sqrt(fan_in)) initialization.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, group: ParamGroup) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.get(&format!("{name}.weight"), &[d_in, d_out], Init::Uniform(bound), group)?;
        let bias = store.get(&format!("{name}.bias"), &[d_out], Init::Uniform(bound), group)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        match &self.bias {
            Some(b) => crate::ops::add_bias(&y, b),
            None => Ok(y),
        }
    }
}

/// `x @ w` over the last axis of `x`, for any number of leading axes.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let d_in = *dims.last().ok_or_else(|| structural!("matmul on a scalar"))?;
    if w.dims()[0] != d_in {
        return Err(structural!(
            "input width {d_in} does not match weight rows {}",
            w.dims()[0]
        ));
    }
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((lead, d_in))?.matmul(w)?;
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(w.dims()[1]);
    Ok(y.reshape(out_dims)?)
}

/// Two linear layers with a ReLU between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, ParamGroup::Trainable)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, ParamGroup::Trainable)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[width], Init::Ones, group)?,
            bias: store.get(&format!("{name}.bias"), &[width], Init::Zeros, group)?,
            eps,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, eps: f64) -> Self {
        Self { weight, bias, eps }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::ops::layer_norm(x, &self.weight, &self.bias, self.eps)
    }
}

/// Softmax over the last axis. The max shift is detached: it does not change
/// the result, only the numerics.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Batched scaled dot-product attention: `softmax(Q Kᵀ / sqrt(d_k)) V`.
///
/// `q`: (.., a, d_k), `k`: (.., b, d_k), `v`: (.., b, d_v). Returns the output
/// and the attention weights (.., a, b).
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    scaled_dot_attention_masked(q, k, v, None)
}

/// Same as [`scaled_dot_attention`] with an additive logit mask broadcast over the batch.
pub fn scaled_dot_attention_masked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let d_k = *q.dims().last().unwrap_or(&0);
    let kd = *k.dims().last().unwrap_or(&0);
    if d_k != kd || d_k == 0 {
        return Err(structural!("query width {d_k} and key width {kd} differ"));
    }
    let nq = q.rank();
    if k.rank() != nq || v.rank() != nq || k.dims()[nq - 2] != v.dims()[nq - 2] {
        return Err(structural!(
            "attention operands disagree: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        ));
    }
    let logits = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? / (d_k as f64).sqrt())?;
    let logits = match mask {
        Some(m) => logits.broadcast_add(m)?,
        None => logits,
    };
    let weights = softmax_last(&logits)?;
    let out = weights.matmul(&v.contiguous()?)?;
    Ok((out, weights))
}
