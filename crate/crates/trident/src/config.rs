//! The run configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trident_core::config::{ModelConfig, TrainConfig};
use trident_core::data::SyntheticSpec;
use trident_core::error::Error as CoreError;

use crate::error::Result;
use crate::io::read_json;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Stub,
    Live,
    /// Cache only; a missing entry is an error.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Concurrent generation requests.
    pub workers: usize,
    /// Extra attempts per composition after the first.
    pub max_retries: usize,
    /// Chat model name sent to the live endpoint.
    pub model: String,
    /// JSON object mapping prompt SHA-256 to a canned transcript.
    pub fixtures: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::Stub, workers: 4, max_retries: 3, model: "gpt-3.5-turbo".into(), fixtures: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub manifest: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub aux: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub provider: ProviderConfig,
    /// Top-k of the evaluation sweep.
    pub topk: usize,
    pub out: PathBuf,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            provider: ProviderConfig::default(),
            topk: 1,
            out: PathBuf::from("runs"),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    /// Small dimensions that match the default synthetic dataset and train
    /// on a laptop CPU in seconds.
    pub fn desk() -> Self {
        let s = SyntheticSpec::default();
        Self {
            model: ModelConfig {
                num_patches: s.num_patches,
                feature_dim: s.cls_dim,
                patch_dim: s.patch_dim,
                word_embedding_dim: 32,
                word_dim: 32,
                comp_dim: 32,
                local_features: 4,
                global_features: 2,
                word_mlp_hidden: vec![64],
                disentangle_hidden: 32,
                ..ModelConfig::default()
            },
            train: TrainConfig { batch_size: 32, epochs: 60, lr_main: 1e-3, decay_epochs: vec![40, 50], ..TrainConfig::default() },
            out: PathBuf::from("runs/desk"),
            synthetic: s,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CoreError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ))
            .into());
        }
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.topk == 0 {
            return Err(CoreError::Config("topk must be at least 1".into()).into());
        }
        if self.provider.workers == 0 {
            return Err(CoreError::Config("provider.workers must be at least 1".into()).into());
        }
        Ok(())
    }
}
