//! Resolved training settings: named presets, JSON config files with a
//! closed schema, and assembly into a model configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use bytenet::data::{EOS_ID, PAD_ID};
use bytenet::layers::blocks::BlockVariant;
use bytenet::network::ModelConfig;
use bytenet::training::AdamConfig;
use bytenet::{Error, Result};

/// Everything a training run needs beyond the data itself. Unknown keys
/// in a config file are hard errors; silent drift is worse than a retype.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Inner block width d; the residual stack runs at 2d channels.
    pub hidden: usize,
    pub num_sets: usize,
    pub dilations_per_set: Vec<usize>,
    pub source_kernel: usize,
    pub target_kernel: usize,
    pub block_variant: BlockVariant,
    /// Language-model window: total characters per training row.
    pub window_total: usize,
    /// Leading characters that only provide context (no loss).
    pub window_context: usize,
    /// Pair lengths are padded up to the next multiple of this.
    pub bucket_quantum: usize,
    pub batch_main: usize,
    pub batch_aux: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings::desk()
    }
}

impl TrainSettings {
    /// Small configuration that trains in minutes on one core. This is
    /// the scale the test suite exercises end to end.
    pub fn desk() -> Self {
        TrainSettings {
            hidden: 64,
            num_sets: 1,
            dilations_per_set: vec![1, 2, 4, 8],
            source_kernel: 3,
            target_kernel: 3,
            block_variant: BlockVariant::Relu,
            window_total: 64,
            window_context: 32,
            bucket_quantum: 16,
            batch_main: 8,
            batch_aux: 8,
            steps: 1000,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }

    /// Full-scale character-level language model: d = 892, five sets of
    /// five multiplicative-unit blocks dilated 1,2,4,8,16, masked kernel 3,
    /// Adam at 1e-2 with weight decay 1e-5, and 515-character windows of
    /// which the first 315 are context only.
    pub fn paper_lm() -> Self {
        TrainSettings {
            hidden: 892,
            num_sets: 5,
            dilations_per_set: vec![1, 2, 4, 8, 16],
            source_kernel: 5,
            target_kernel: 3,
            block_variant: BlockVariant::Mu,
            window_total: 515,
            window_context: 315,
            bucket_quantum: 25,
            batch_main: 8,
            batch_aux: 8,
            steps: 100_000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            clip_norm: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainSettings::desk()),
            "paper-lm" => Ok(TrainSettings::paper_lm()),
            other => Err(Error::Config(format!(
                "unknown preset `{}`; available: desk, paper-lm",
                other
            ))),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    pub fn model_config(
        &self,
        vocab_size: usize,
        has_source: bool,
        ngram_max_order: usize,
        ngram_table_sizes: Vec<usize>,
    ) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            num_sets: self.num_sets,
            dilations_per_set: self.dilations_per_set.clone(),
            source_kernel: self.source_kernel,
            target_kernel: self.target_kernel,
            block_variant: self.block_variant,
            ngram_max_order,
            ngram_table_sizes,
            has_source,
            eos_id: EOS_ID,
            pad_id: PAD_ID,
        }
    }
}

/// Preset and config file are mutually exclusive; neither means `desk`.
pub fn resolve(preset: Option<&str>, config: Option<&Path>) -> Result<TrainSettings> {
    match (preset, config) {
        (Some(_), Some(_)) => {
            Err(Error::Config("--preset and --config are mutually exclusive".into()))
        }
        (Some(name), None) => TrainSettings::preset(name),
        (None, Some(path)) => TrainSettings::from_file(path),
        (None, None) => Ok(TrainSettings::desk()),
    }
}
