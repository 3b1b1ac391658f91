//! Model and optimization hyperparameters.
//!
//! Defaults reproduce the MIT-States setup at full scale; see
//! [`DatasetPreset`] for the other two benchmark configurations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the cosine-classifier temperature enters the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// `cos / δ`
    Divide,
    /// `δ · cos`
    Multiply,
}

impl TemperatureMode {
    #[inline]
    pub fn logit_scale(self, temperature: f64) -> f64 {
        match self {
            TemperatureMode::Divide => 1.0 / temperature,
            TemperatureMode::Multiply => temperature,
        }
    }
}

/// Component switches; all on is the full model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Off: the global feature is the raw class token (a single row).
    pub condition_masks: bool,
    /// Off: the local feature is the mean of the aligned patches (a single row).
    pub faa: bool,
    /// Off: attribute features are classified over attributes plus auxiliary
    /// words, object features over objects only.
    pub word_expanding: bool,
    /// Off: one-hot supervision everywhere.
    pub attribute_smoothing: bool,
    /// Off: the disentanglement branch losses are dropped.
    pub disentangle_losses: bool,
    /// Off: the orthogonality penalty is dropped.
    pub ortho: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            condition_masks: true,
            faa: true,
            word_expanding: true,
            attribute_smoothing: true,
            disentangle_losses: true,
            ortho: true,
        }
    }
}

impl Ablations {
    pub const NAMES: [&'static str; 6] =
        ["condition_masks", "faa", "word_expanding", "attribute_smoothing", "disentangle_losses", "ortho"];

    /// Turns one component off by name.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        let slot = match name {
            "condition_masks" => &mut self.condition_masks,
            "faa" => &mut self.faa,
            "word_expanding" => &mut self.word_expanding,
            "attribute_smoothing" => &mut self.attribute_smoothing,
            "disentangle_losses" => &mut self.disentangle_losses,
            "ortho" => &mut self.ortho,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        };
        *slot = false;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ortho: f64,
    pub comp: f64,
    pub attr: f64,
    pub obj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ortho: 0.1, comp: 1.0, attr: 0.5, obj: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch tokens per image (`n`).
    pub num_patches: usize,
    /// Class-token width, which is also the aligned feature width `d`.
    pub feature_dim: usize,
    /// Width of the connector-output patch features.
    pub patch_dim: usize,
    /// Width of a word embedding row.
    pub word_embedding_dim: usize,
    /// Joint word space; must equal `feature_dim` since disentangled
    /// features are compared against projected words directly.
    pub word_dim: usize,
    /// Joint composition space.
    pub comp_dim: usize,
    /// Local (FAA) feature count `p`.
    pub local_features: usize,
    /// Global (condition mask) feature count `q`.
    pub global_features: usize,
    pub word_mlp_hidden: Vec<usize>,
    pub disentangle_hidden: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub temperature_mode: TemperatureMode,
    /// Attribute smoothing factor `α`.
    pub smoothing: f64,
    /// Auxiliary attributes per composition `t`.
    pub aux_count: usize,
    pub loss_weights: LossWeights,
    pub ablations: Ablations,
    pub batch_norm_eps: f64,
    pub batch_norm_momentum: f64,
    /// Std of the Gaussian used for FAA weights and mask perturbations.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_patches: 576,
            feature_dim: 1024,
            patch_dim: 4096,
            word_embedding_dim: 4096,
            word_dim: 1024,
            comp_dim: 1024,
            local_features: 12,
            global_features: 6,
            word_mlp_hidden: vec![2048],
            disentangle_hidden: 512,
            dropout: 0.3,
            temperature: 0.05,
            temperature_mode: TemperatureMode::Divide,
            smoothing: 0.09,
            aux_count: 3,
            loss_weights: LossWeights::default(),
            ablations: Ablations::default(),
            batch_norm_eps: 1e-5,
            batch_norm_momentum: 0.1,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Rows produced by the local branch after ablations.
    pub fn effective_local(&self) -> usize {
        if self.ablations.faa {
            self.local_features
        } else {
            1
        }
    }

    /// Rows produced by the global branch after ablations.
    pub fn effective_global(&self) -> usize {
        if self.ablations.condition_masks {
            self.global_features
        } else {
            1
        }
    }

    /// Stacked feature count `h`.
    pub fn stacked_features(&self) -> usize {
        self.effective_local() + self.effective_global()
    }

    /// Smoothing factor after the `attribute_smoothing` switch.
    pub fn effective_smoothing(&self) -> f64 {
        if self.ablations.attribute_smoothing {
            self.smoothing
        } else {
            0.0
        }
    }

    pub fn logit_scale(&self) -> f64 {
        self.temperature_mode.logit_scale(self.temperature)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_patches", self.num_patches),
            ("feature_dim", self.feature_dim),
            ("patch_dim", self.patch_dim),
            ("word_embedding_dim", self.word_embedding_dim),
            ("word_dim", self.word_dim),
            ("comp_dim", self.comp_dim),
            ("local_features", self.local_features),
            ("global_features", self.global_features),
            ("disentangle_hidden", self.disentangle_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.word_mlp_hidden.contains(&0) {
            return Err(Error::Config("word_mlp_hidden widths must be positive".into()));
        }
        if self.word_dim != self.feature_dim {
            return Err(Error::Config(format!(
                "word_dim ({}) must equal feature_dim ({})",
                self.word_dim, self.feature_dim
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("smoothing must lie in [0, 1)".into()));
        }
        if self.smoothing > 0.0 && self.aux_count == 0 {
            return Err(Error::Config("smoothing > 0 needs at least one auxiliary attribute".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        let w = &self.loss_weights;
        if [w.ortho, w.comp, w.attr, w.obj].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.batch_norm_eps > 0.0) || !(0.0..=1.0).contains(&self.batch_norm_momentum) {
            return Err(Error::Config("invalid batch-norm settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub lr_main: f64,
    pub lr_embeddings: f64,
    /// 1-based epoch counts after which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Whether batch-norm affine parameters receive weight decay.
    pub decay_batch_norm: bool,
    /// Whether the word embedding rows are fine-tuned at all.
    pub train_embeddings: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 50,
            weight_decay: 5e-5,
            lr_main: 2e-4,
            lr_embeddings: 1.5e-6,
            decay_epochs: vec![30, 40],
            decay_factor: 0.1,
            grad_clip: None,
            decay_batch_norm: false,
            train_embeddings: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Learning-rate multiplier in effect during `epoch` (1-based).
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&m| epoch > m).count();
        libm::pow(self.decay_factor, passed as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_embeddings", self.lr_embeddings)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_epochs must be strictly increasing".into()));
        }
        // A zero-epoch run never reaches a milestone.
        if let Some(&m) = self.decay_epochs.iter().find(|&&m| self.epochs > 0 && (m == 0 || m >= self.epochs)) {
            return Err(Error::Config(format!("decay epoch {m} must lie in 1..{}", self.epochs)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-benchmark settings that differ between the three datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetPreset {
    MitStates,
    Cgqa,
    VawCzsl,
}

impl DatasetPreset {
    pub fn global_features(self) -> usize {
        match self {
            DatasetPreset::MitStates => 6,
            DatasetPreset::Cgqa => 2,
            DatasetPreset::VawCzsl => 4,
        }
    }

    pub fn smoothing(self) -> f64 {
        match self {
            DatasetPreset::MitStates => 0.09,
            DatasetPreset::Cgqa | DatasetPreset::VawCzsl => 0.03,
        }
    }

    /// Top-k used for the calibration sweep.
    pub fn top_k(self) -> usize {
        match self {
            DatasetPreset::VawCzsl => 3,
            _ => 1,
        }
    }

    pub fn model_config(self) -> ModelConfig {
        let q = self.global_features();
        ModelConfig { global_features: q, local_features: 2 * q, smoothing: self.smoothing(), ..ModelConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_decays_after_milestones() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_factor(1), 1.0);
        assert_eq!(c.lr_factor(30), 1.0);
        assert!((c.lr_factor(31) - 0.1).abs() < 1e-15);
        assert!((c.lr_factor(40) - 0.1).abs() < 1e-15);
        assert!((c.lr_factor(41) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn presets_keep_local_twice_global() {
        for p in [DatasetPreset::MitStates, DatasetPreset::Cgqa, DatasetPreset::VawCzsl] {
            let c = p.model_config();
            assert_eq!(c.local_features, 2 * c.global_features);
            c.validate().unwrap();
        }
        assert_eq!(DatasetPreset::MitStates.model_config().stacked_features(), 18);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = ModelConfig { temperature: 0.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c.temperature = 0.05;
        c.smoothing = 1.0;
        assert!(c.validate().is_err());
        c.smoothing = 0.09;
        c.word_dim = 512;
        assert!(c.validate().is_err());

        let t = TrainConfig { epochs: 20, ..TrainConfig::default() };
        assert!(t.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn ablation_names_are_all_accepted() {
        for name in Ablations::NAMES {
            let mut a = Ablations::default();
            a.disable(name).unwrap();
            assert_ne!(a, Ablations::default());
        }
        assert!(Ablations::default().disable("bogus").is_err());
    }
}
