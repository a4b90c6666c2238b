use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{RLastMode, DEFAULT_K_MAX};
use crate::memory::OcmConfig;
use crate::numerics::AdamConfig;
use crate::ot::DiagOptions;
use crate::stream::StreamSpec;
use crate::vae::{DecoderFamily, Objective, VaeArch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    #[default]
    VaeSingle,
    VaeMixture,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MemoryConfig {
    Ocm(OcmConfig),
    RandomRemoval { capacity: usize },
    Reservoir { capacity: usize },
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig::Ocm(OcmConfig::default())
    }
}

impl MemoryConfig {
    /// Total number of samples the memory may hold at a selection point.
    pub fn budget(&self) -> Option<usize> {
        match self {
            MemoryConfig::Ocm(c) => c.ltm_cap.map(|l| l + c.stm_capacity),
            MemoryConfig::RandomRemoval { capacity } | MemoryConfig::Reservoir { capacity } => {
                Some(*capacity)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub family: DecoderFamily,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            encoder_hidden: vec![32],
            decoder_hidden: vec![32],
            family: DecoderFamily::Gaussian {
                sigma: std::f64::consts::FRAC_1_SQRT_2,
            },
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, data_dim: usize) -> VaeArch {
        VaeArch {
            data_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            family: self.family,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub updates_per_batch: usize,
    pub minibatch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Elbo,
            updates_per_batch: 1,
            minibatch_size: 20,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    pub enabled: bool,
    pub lambda2: f64,
    pub k_max: usize,
    pub r_last_mode: RLastMode,
}

pub const DEFAULT_LAMBDA2: f64 = 400.0;

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda2: DEFAULT_LAMBDA2,
            k_max: DEFAULT_K_MAX,
            r_last_mode: RLastMode::EveryCheck,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Importance samples for the final log-likelihood estimate.
    pub iwae_m: usize,
    /// Batches between periodic evaluations; unset means once per STM cycle
    /// (or per `fallback_every` batches for baseline memories).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    /// Cadence used by baseline memories when `eval_every` is unset.
    pub fallback_every: usize,
    /// Test rows used by periodic evaluation.
    pub periodic_samples: usize,
    /// Test rows used by the final evaluation (all when unset).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_samples: Option<usize>,
    /// Emit bound diagnostics at the end of the run.
    pub diagnostics: bool,
    /// Target rows per class used by bound diagnostics.
    pub diag_samples: usize,
    pub diag: DiagOptions,
    /// Write a resumable checkpoint every this many evaluation points.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iwae_m: 1000,
            eval_every: None,
            fallback_every: 4,
            periodic_samples: 500,
            final_samples: None,
            diagnostics: true,
            diag_samples: 200,
            diag: DiagOptions::default(),
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    /// Number of classes; inferred from the labels when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub learner: LearnerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub stream: StreamSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub expansion: ExpansionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Full config with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config echo: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stream.sources.is_empty() {
            return Err(field("stream.sources", "at least one source is required"));
        }
        if self.stream.batch_size == 0 {
            return Err(field("stream.batch_size", "must be positive"));
        }
        if self.model.latent_dim == 0 {
            return Err(field("model.latent_dim", "must be positive"));
        }
        if self.model.encoder_hidden.is_empty() || self.model.decoder_hidden.is_empty() {
            return Err(field(
                "model",
                "encoder_hidden and decoder_hidden need at least one width",
            ));
        }
        if self
            .model
            .encoder_hidden
            .iter()
            .chain(&self.model.decoder_hidden)
            .any(|&w| w == 0)
        {
            return Err(field("model", "hidden widths must be positive"));
        }
        self.model
            .family
            .validate()
            .map_err(|e| field("model.family", e))?;
        self.train
            .objective
            .validate()
            .map_err(|e| field("train.objective", e))?;
        if self.train.updates_per_batch == 0 {
            return Err(field("train.updates_per_batch", "must be at least 1"));
        }
        if self.train.minibatch_size == 0 {
            return Err(field("train.minibatch_size", "must be at least 1"));
        }
        let a = &self.train.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(field("train.adam.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(field("train.adam", "beta1 and beta2 must lie in [0, 1)"));
        }
        if !(a.eps > 0.0) {
            return Err(field("train.adam.eps", "must be positive"));
        }
        match &self.memory {
            MemoryConfig::Ocm(c) => c.validate().map_err(|e| field("memory", e))?,
            MemoryConfig::RandomRemoval { capacity } | MemoryConfig::Reservoir { capacity } => {
                if *capacity == 0 {
                    return Err(field("memory.capacity", "must be positive"));
                }
            }
        }
        let e = &self.expansion;
        if !(e.lambda2 > 0.0) {
            return Err(field(
                "expansion.lambda2",
                format!("must be > 0, got {}", e.lambda2),
            ));
        }
        if e.k_max == 0 {
            return Err(field("expansion.k_max", "must be at least 1"));
        }
        if e.enabled {
            if self.learner != LearnerKind::VaeMixture {
                return Err(field(
                    "expansion.enabled",
                    "requires learner = \"vae_mixture\"",
                ));
            }
            if !matches!(self.memory, MemoryConfig::Ocm(_)) {
                return Err(field("expansion.enabled", "requires memory.kind = \"ocm\""));
            }
        }
        if self.eval.iwae_m == 0 {
            return Err(field("eval.iwae_m", "must be at least 1"));
        }
        if self.eval.eval_every == Some(0) || self.eval.fallback_every == 0 {
            return Err(field("eval.eval_every", "must be positive"));
        }
        if self.eval.periodic_samples == 0 || self.eval.diag_samples == 0 {
            return Err(field("eval", "sample counts must be positive"));
        }
        if self.eval.checkpoint_every == Some(0) {
            return Err(field("eval.checkpoint_every", "must be positive"));
        }
        if self.learner == LearnerKind::Classifier {
            if self.classifier.hidden.is_empty() || self.classifier.hidden.contains(&0) {
                return Err(field(
                    "classifier.hidden",
                    "needs at least one positive width",
                ));
            }
            if self.classifier.classes == Some(0) || self.classifier.classes == Some(1) {
                return Err(field("classifier.classes", "needs at least two classes"));
            }
        }
        Ok(())
    }
}
