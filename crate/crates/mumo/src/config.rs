//! Run configuration: a JSON file whose every field has a default, with
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use mumo_core::model::ModelConfig;
use mumo_core::tokenizer::TokenizerKind;
use mumo_core::unigraph::GraphConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Pretraining corpus; the bundled corpus when absent.
    pub corpus: Option<PathBuf>,
    /// Labelled data for fine-tuning and evaluation; the bundled corpus when absent.
    pub labelled: Option<PathBuf>,
    /// Vocabulary file; built from the corpus when absent.
    pub vocab: Option<PathBuf>,
    /// Held-out share of the labelled data.
    pub valid_fraction: f64,
    pub workers: usize,
    pub queue_capacity: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            labelled: None,
            vocab: None,
            valid_fraction: 0.2,
            workers: 2,
            queue_capacity: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub warmup: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub clip: Option<f64>,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            warmup: 50,
            steps: 200,
            batch_size: 32,
            clip: Some(1.0),
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub warmup: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub clip: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 3e-4,
            warmup: 0,
            epochs: 30,
            batch_size: 32,
            clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub seed: u64,
    pub precision: Precision,
    pub tokenizer: TokenizerKind,
    pub out_dir: PathBuf,
    /// Write attention weights and per-layer GTK states during evaluation.
    pub debug_dumps: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            seed: 0,
            precision: Precision::F32,
            tokenizer: TokenizerKind::Substructure,
            out_dir: PathBuf::from("runs"),
            debug_dumps: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(1);
        m.validate().map_err(|e| Error::Config(e.to_string()))?;
        for (batch, lr) in [(self.pretrain.batch_size, self.pretrain.lr), (self.finetune.batch_size, self.finetune.lr)] {
            if batch == 0 || !(lr >= 0.0) {
                return Err(Error::Config("batch_size must be positive and lr non-negative".into()));
            }
        }
        if !(0.0..1.0).contains(&self.data.valid_fraction) {
            return Err(Error::Config("valid_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
