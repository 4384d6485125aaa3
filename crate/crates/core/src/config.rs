use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::AdjacencyMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Forecast,
    Impute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// GPT-2-class checkpoint, partially fine-tuned with LoRA.
    #[default]
    Pretrained,
    /// Bidirectional transformer encoder trained from scratch.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Path to a `.safetensors` file or directory, or a name resolved under
    /// the pretrained cache directory.
    pub checkpoint: String,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of d_plm.
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Pretrained,
            checkpoint: "gpt2".into(),
            heads: 12,
            mlp_ratio: 4,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl BackboneConfig {
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank.max(1) as f64
    }
}

/// Model hyperparameters. Defaults are the published configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input steps T.
    pub window: usize,
    /// Output steps T_out; equals `window` for imputation.
    pub horizon: usize,
    pub channels: usize,
    pub interval_seconds: u32,
    pub d_t: usize,
    pub d_n: usize,
    /// Number of Laplacian eigenvectors kept.
    pub k: usize,
    /// Number of region-level tokens.
    pub m: usize,
    /// Query/key width inside sandglass attention.
    pub d_h: usize,
    pub d_plm: usize,
    pub layers: usize,
    pub sga_heads: usize,
    pub ln_eps: f64,
    pub adjacency_mode: AdjacencyMode,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 12,
            horizon: 12,
            channels: 1,
            interval_seconds: 300,
            d_t: 64,
            d_n: 64,
            k: 64,
            m: 128,
            d_h: 128,
            d_plm: 768,
            layers: 3,
            sga_heads: 1,
            ln_eps: 1e-5,
            adjacency_mode: AdjacencyMode::Binary,
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("d_t", self.d_t),
            ("d_n", self.d_n),
            ("k", self.k),
            ("m", self.m),
            ("d_h", self.d_h),
            ("d_plm", self.d_plm),
            ("sga_heads", self.sga_heads),
            ("backbone.heads", self.backbone.heads),
            ("backbone.mlp_ratio", self.backbone.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if self.window < 2 {
            return Err(Error::Config("window must be at least 2 (trend token)".into()));
        }
        if self.d_h % self.sga_heads != 0 || self.d_plm % self.sga_heads != 0 {
            return Err(Error::Config(format!(
                "sga_heads={} must divide d_h={} and d_plm={}",
                self.sga_heads, self.d_h, self.d_plm
            )));
        }
        if self.d_plm % self.backbone.heads != 0 {
            return Err(Error::Config(format!(
                "backbone.heads={} must divide d_plm={}",
                self.backbone.heads, self.d_plm
            )));
        }
        crate::spectral::slots_per_day(self.interval_seconds)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Backbone sequence length: two temporal tokens plus the region tokens.
    pub fn sequence_len(&self) -> usize {
        2 + self.m
    }

    pub fn output_width(&self) -> usize {
        self.horizon * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPattern {
    Rm,
    Cm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingConfig {
    pub pattern: MissingPattern,
    pub rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `.npz` (key `data`) or `.npy` holding a T x N x C array.
    pub path: PathBuf,
    /// CSV edge list with header `from,to,cost`.
    pub adjacency: PathBuf,
    pub name: String,
    /// Timestamp of the first sample (`YYYY-MM-DDTHH:MM:SS`), used when the
    /// archive has no `timestamps` array.
    pub start_time: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            adjacency: PathBuf::new(),
            name: String::new(),
            start_time: "2016-07-01T00:00:00".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lambda_c: f64,
    pub seeds: Vec<u64>,
    /// Keep only the chronological first fraction of training windows.
    pub few_shot_ratio: Option<f64>,
    /// Range of the per-sample fraction of observed entries hidden during
    /// imputation training.
    pub condition_ratio: [f64; 2],
    /// Stride between consecutive windows.
    pub stride: usize,
    /// `f32` or `f64`.
    pub dtype: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            epochs: 500,
            patience: 50,
            batch_size: 64,
            eval_batch_size: 64,
            lambda_c: 0.1,
            seeds: vec![1],
            few_shot_ratio: None,
            condition_ratio: [0.1, 0.9],
            stride: 1,
            dtype: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub missing: Option<MissingConfig>,
}

impl ExperimentConfig {
    pub fn new(task: Task) -> Self {
        let mut cfg = Self {
            task,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            missing: None,
        };
        if task == Task::Impute {
            cfg.model.horizon = cfg.model.window;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.task == Task::Impute && self.model.horizon != self.model.window {
            return Err(Error::Config(format!(
                "imputation reconstructs the input window: horizon {} must equal window {}",
                self.model.horizon, self.model.window
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.eval_batch_size == 0 || t.stride == 0 {
            return Err(Error::Config("batch sizes and stride must be positive".into()));
        }
        if t.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(r) = t.few_shot_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("few_shot_ratio {r} outside (0, 1]")));
            }
        }
        let [lo, hi] = t.condition_ratio;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("condition_ratio [{lo}, {hi}] is not a valid range")));
        }
        if !matches!(t.dtype.as_str(), "f32" | "f64") {
            return Err(Error::Config(format!("dtype must be f32 or f64, got {}", t.dtype)));
        }
        if let Some(m) = &self.missing {
            if !(0.0..=1.0).contains(&m.rate) {
                return Err(Error::Config(format!("missing rate {} outside [0, 1]", m.rate)));
            }
        }
        if self.task == Task::Impute && self.missing.is_none() {
            log::info!("imputation without an injected missing pattern: evaluating on condition-missing positions only");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dtype(&self) -> candle_core::DType {
        if self.train.dtype == "f64" {
            candle_core::DType::F64
        } else {
            candle_core::DType::F32
        }
    }
}
