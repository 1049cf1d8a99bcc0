//! Model, optimizer, masking and training configuration.
//!
//! Configs are TOML files carrying an explicit `version`. Every table rejects
//! unknown keys. Two presets ship with the crate: [`FlavaConfig::paper`] holds
//! the full-size hyperparameters and [`FlavaConfig::desk`] a scaled-down model
//! that trains in minutes on one CPU.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlavaError, Result};
use crate::text::RESERVED_TOKENS;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub multimodal_layers: usize,
    pub dropout: f64,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub text_vocab_size: usize,
    pub max_text_len: usize,
    pub codebook_size: usize,
    pub projection_dim: usize,
    pub mask_rate_text: f64,
    pub mask_ratio_image: f64,
    /// Initial contrastive temperature; stored as `ln(1 / t)`.
    pub temperature_init: f64,
    pub min_temperature: f64,
    /// Share the token embedding table with the MLM/MMM text decoders.
    pub tie_text_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    WarmupCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_updates: u64,
    pub total_updates: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    /// Smallest block area, in patches.
    pub min_block_patches: usize,
    pub min_aspect: f64,
    pub max_aspect: f64,
    /// BERT 80/10/10 replacement instead of pure `[MASK]` replacement.
    pub bert_mixed_replacement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gc: f64,
    pub mmm_image: f64,
    pub mmm_text: f64,
    pub itm: f64,
    pub mim: f64,
    pub mlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gc: 1.0,
            mmm_image: 1.0,
            mmm_text: 1.0,
            itm: 1.0,
            mim: 1.0,
            mlm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MultimodalPairs,
    UnimodalImages,
    UnimodalText,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::MultimodalPairs => "multimodal_pairs",
            DatasetKind::UnimodalImages => "unimodal_images",
            DatasetKind::UnimodalText => "unimodal_text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// A path (JSONL file or corpus directory) or `synthetic:<n>`.
    pub source: String,
    pub sampling_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of optimizer updates to run; 0 writes the initial checkpoint only.
    pub budget: u64,
    pub itm_negative_fraction: f64,
    pub loss_weights: LossWeights,
    /// Evaluate held-out retrieval every this many steps (0 disables).
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    /// Pair source for the periodic retrieval evaluation; defaults to the
    /// first multimodal dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_source: Option<String>,
    /// Pre-fitted visual codebook; fitted from the training images when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<String>,
    /// Patches sampled per image when fitting the codebook on the fly.
    pub codebook_fit_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlavaConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub datasets: Vec<DatasetSpec>,
}

/// A [`ModelConfig`] whose invariants have been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig(ModelConfig);

impl std::ops::Deref for ValidatedConfig {
    type Target = ModelConfig;
    fn deref(&self) -> &ModelConfig {
        &self.0
    }
}

impl ValidatedConfig {
    pub fn into_inner(self) -> ModelConfig {
        self.0
    }
}

fn err(field: &str, rule: &'static str, detail: impl Into<String>) -> FlavaError {
    FlavaError::Config {
        field: field.to_string(),
        rule,
        detail: detail.into(),
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(err(field, "positivity", "must be >= 1"));
    }
    Ok(())
}

fn fraction(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(err(field, "fraction", format!("{v} not in [0, 1]")));
    }
    Ok(())
}

fn positive_real(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(err(field, "positivity", format!("{v} must be > 0")));
    }
    Ok(())
}

/// Checks every [`ModelConfig`] invariant, reporting the first violation.
pub fn validate_config(config: ModelConfig) -> Result<ValidatedConfig> {
    let c = &config;
    for (name, v) in [
        ("hidden_size", c.hidden_size),
        ("num_heads", c.num_heads),
        ("intermediate_size", c.intermediate_size),
        ("image_layers", c.image_layers),
        ("text_layers", c.text_layers),
        ("multimodal_layers", c.multimodal_layers),
        ("patch_size", c.patch_size),
        ("image_size", c.image_size),
        ("channels", c.channels),
        ("text_vocab_size", c.text_vocab_size),
        ("max_text_len", c.max_text_len),
        ("codebook_size", c.codebook_size),
        ("projection_dim", c.projection_dim),
    ] {
        positive(name, v)?;
    }
    fraction("dropout", c.dropout)?;
    fraction("mask_rate_text", c.mask_rate_text)?;
    fraction("mask_ratio_image", c.mask_ratio_image)?;
    positive_real("temperature_init", c.temperature_init)?;
    positive_real("min_temperature", c.min_temperature)?;
    if c.hidden_size % c.num_heads != 0 {
        return Err(err(
            "hidden_size",
            "divisibility",
            format!("{} not divisible by num_heads {}", c.hidden_size, c.num_heads),
        ));
    }
    if c.image_size % c.patch_size != 0 {
        return Err(err(
            "image_size",
            "divisibility",
            format!("{} not divisible by patch_size {}", c.image_size, c.patch_size),
        ));
    }
    if c.text_vocab_size <= RESERVED_TOKENS as usize {
        return Err(err(
            "text_vocab_size",
            "reserved_tokens",
            format!("must exceed the {RESERVED_TOKENS} reserved special ids"),
        ));
    }
    if c.max_text_len < 2 {
        return Err(err("max_text_len", "positivity", "needs room for [CLS] and [SEP]"));
    }
    if c.codebook_size < 2 {
        return Err(err("codebook_size", "positivity", "a codebook needs at least 2 entries"));
    }
    if c.min_temperature > c.temperature_init {
        return Err(err("min_temperature", "ordering", "exceeds temperature_init"));
    }
    Ok(ValidatedConfig(config))
}

pub fn validate_optim(o: &OptimConfig) -> Result<()> {
    positive("optim.batch_size", o.batch_size)?;
    positive_real("optim.learning_rate", o.learning_rate)?;
    if o.total_updates == 0 {
        return Err(err("optim.total_updates", "positivity", "must be >= 1"));
    }
    if o.warmup_updates > o.total_updates {
        return Err(err(
            "optim.warmup_updates",
            "ordering",
            format!("{} exceeds total_updates {}", o.warmup_updates, o.total_updates),
        ));
    }
    if !(o.weight_decay >= 0.0) {
        return Err(err("optim.weight_decay", "positivity", "must be >= 0"));
    }
    for (name, b) in [("optim.beta1", o.beta1), ("optim.beta2", o.beta2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(err(name, "fraction", format!("{b} not in [0, 1)")));
        }
    }
    positive_real("optim.eps", o.eps)?;
    if let Some(clip) = o.grad_clip {
        positive_real("optim.grad_clip", clip)?;
    }
    Ok(())
}

pub fn validate_masking(m: &MaskingConfig) -> Result<()> {
    positive("masking.min_block_patches", m.min_block_patches)?;
    positive_real("masking.min_aspect", m.min_aspect)?;
    if m.max_aspect < m.min_aspect {
        return Err(err("masking.max_aspect", "ordering", "below min_aspect"));
    }
    Ok(())
}

/// Checks that sampling probabilities form a distribution (tolerance 1e-9).
pub fn validate_probabilities(probs: &[f64]) -> Result<()> {
    if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(FlavaError::Probabilities { sum: f64::NAN });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FlavaError::Probabilities { sum });
    }
    Ok(())
}

impl FlavaConfig {
    /// Full-size hyperparameters.
    pub fn paper() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig {
                hidden_size: 768,
                num_heads: 12,
                intermediate_size: 3072,
                image_layers: 12,
                text_layers: 12,
                multimodal_layers: 6,
                dropout: 0.0,
                patch_size: 16,
                image_size: 224,
                channels: 3,
                text_vocab_size: 30522,
                max_text_len: 512,
                codebook_size: 8192,
                projection_dim: 512,
                mask_rate_text: 0.15,
                mask_ratio_image: 0.4,
                temperature_init: 0.07,
                min_temperature: 0.01,
                tie_text_embeddings: false,
                seed: 0,
            },
            masking: MaskingConfig {
                min_block_patches: 16,
                min_aspect: 0.3,
                max_aspect: 1.0 / 0.3,
                bert_mixed_replacement: false,
            },
            optim: OptimConfig {
                batch_size: 8192,
                learning_rate: 1e-3,
                schedule: Schedule::WarmupCosine,
                warmup_updates: 10_000,
                // 150K multimodal updates at a 0.70 sampling probability.
                total_updates: 214_286,
                weight_decay: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                grad_clip: None,
            },
            train: TrainConfig {
                budget: 214_286,
                itm_negative_fraction: 0.5,
                loss_weights: LossWeights::default(),
                eval_interval: 8_000,
                checkpoint_interval: 8_000,
                eval_source: None,
                codebook: None,
                codebook_fit_images: 4096,
            },
            datasets: vec![
                DatasetSpec {
                    kind: DatasetKind::MultimodalPairs,
                    source: "data/pmd".into(),
                    sampling_probability: 0.70,
                },
                DatasetSpec {
                    kind: DatasetKind::UnimodalImages,
                    source: "data/imagenet1k.jsonl".into(),
                    sampling_probability: 0.15,
                },
                DatasetSpec {
                    kind: DatasetKind::UnimodalText,
                    source: "data/ccnews_bookcorpus.jsonl".into(),
                    sampling_probability: 0.15,
                },
            ],
        }
    }

    /// Scaled-down model for single-machine runs and tests.
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig {
                hidden_size: 64,
                num_heads: 4,
                intermediate_size: 256,
                image_layers: 2,
                text_layers: 2,
                multimodal_layers: 2,
                dropout: 0.0,
                patch_size: 8,
                image_size: 32,
                channels: 3,
                text_vocab_size: 1000,
                max_text_len: 16,
                codebook_size: 256,
                projection_dim: 32,
                mask_rate_text: 0.15,
                mask_ratio_image: 0.4,
                temperature_init: 0.07,
                min_temperature: 0.01,
                tie_text_embeddings: false,
                seed: 0,
            },
            masking: MaskingConfig {
                min_block_patches: 4,
                min_aspect: 0.3,
                max_aspect: 1.0 / 0.3,
                bert_mixed_replacement: false,
            },
            optim: OptimConfig {
                batch_size: 16,
                learning_rate: 2e-3,
                schedule: Schedule::WarmupCosine,
                warmup_updates: 50,
                total_updates: 500,
                weight_decay: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                grad_clip: Some(1.0),
            },
            train: TrainConfig {
                budget: 500,
                itm_negative_fraction: 0.5,
                loss_weights: LossWeights::default(),
                eval_interval: 100,
                checkpoint_interval: 250,
                eval_source: None,
                codebook: None,
                codebook_fit_images: 128,
            },
            datasets: vec![
                DatasetSpec {
                    kind: DatasetKind::MultimodalPairs,
                    source: "synthetic:64".into(),
                    sampling_probability: 0.70,
                },
                DatasetSpec {
                    kind: DatasetKind::UnimodalImages,
                    source: "synthetic:64".into(),
                    sampling_probability: 0.15,
                },
                DatasetSpec {
                    kind: DatasetKind::UnimodalText,
                    source: "synthetic:64".into(),
                    sampling_probability: 0.15,
                },
            ],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<ValidatedConfig> {
        if self.version != CONFIG_VERSION {
            return Err(err(
                "version",
                "version",
                format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        let model = validate_config(self.model.clone())?;
        validate_masking(&self.masking)?;
        validate_optim(&self.optim)?;
        fraction("train.itm_negative_fraction", self.train.itm_negative_fraction)?;
        if !self.datasets.is_empty() {
            let probs: Vec<f64> = self.datasets.iter().map(|d| d.sampling_probability).collect();
            validate_probabilities(&probs)?;
        }
        Ok(model)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FlavaError::ConfigFile(e.to_string()))
    }

    /// Reads a config file, or a preset when `path` is `preset:<name>`.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = match path.to_str().and_then(|p| p.strip_prefix("preset:")) {
            Some(name) => Self::preset(name)
                .ok_or_else(|| FlavaError::ConfigFile(format!("unknown preset `{name}`")))?
                .to_toml(),
            None => std::fs::read_to_string(path).map_err(|e| FlavaError::io(path, e))?,
        };
        let mut value: toml::Table =
            toml::from_str(&text).map_err(|e| FlavaError::ConfigFile(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| FlavaError::ConfigFile(e.to_string()))
    }
}

/// Applies `dotted.key=value` to a parsed config. The value is read as a TOML
/// literal when it parses as one, otherwise as a bare string. Array elements
/// are addressed by index (`datasets.0.source=...`).
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| FlavaError::ConfigFile(format!("override `{assignment}` is not key=value")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.trim().split('.').collect();
    let missing = || FlavaError::ConfigFile(format!("override key `{key}` does not exist"));
    let (last, path) = parts.split_last().expect("split yields one part");
    let parent: &mut toml::Table = root;
    let mut slot: Option<&mut toml::Value> = None;
    for part in path {
        let next = match slot.take() {
            None => parent.get_mut(*part),
            Some(toml::Value::Table(t)) => t.get_mut(*part),
            Some(toml::Value::Array(a)) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            Some(_) => None,
        };
        slot = Some(next.ok_or_else(missing)?);
    }
    let cur: &mut toml::Value = match slot {
        None => parent.get_mut(*last).ok_or_else(missing)?,
        // Optional fields are absent when unset; deserialization still
        // rejects names the schema does not know.
        Some(toml::Value::Table(t)) => t.entry(last.to_string()).or_insert(parsed.clone()),
        Some(toml::Value::Array(a)) => last.parse::<usize>().ok().and_then(|i| a.get_mut(i)).ok_or_else(missing)?,
        Some(_) => return Err(missing()),
    };
    // Integers given for float fields stay valid TOML for serde's f64.
    *cur = match (&*cur, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}
