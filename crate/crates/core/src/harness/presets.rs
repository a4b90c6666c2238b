//! Desk-scale configurations used by the examples and the acceptance suite.

use super::config::{ExperimentConfig, LearnerKind, MemoryConfig};
use crate::memory::OcmConfig;
use crate::rng;
use crate::stream::{BinarizeMode, DatasetDescriptor, SourceSpec, StreamSpec, SyntheticSpec};

pub const DESK_STM: usize = 32;
pub const DESK_LTM_CAP: usize = 96;
pub const DESK_BUDGET: usize = DESK_STM + DESK_LTM_CAP;

pub fn gmm_source(
    modes: usize,
    dim: usize,
    n_per_mode: usize,
    separation: f64,
    offset: f64,
    seed: u64,
) -> SourceSpec {
    SourceSpec {
        dataset: DatasetDescriptor::Synthetic(SyntheticSpec {
            modes,
            dim,
            n_per_mode,
            n_test_per_mode: n_per_mode / 2,
            separation,
            offset,
            seed,
        }),
        sorted: true,
        class_order: None,
    }
}

fn base(name: &str, seed: u64, sources: Vec<SourceSpec>) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seed,
        learner: LearnerKind::VaeSingle,
        output_dir: None,
        stream: StreamSpec {
            sources,
            batch_size: 10,
            binarize: BinarizeMode::Off,
        },
        model: Default::default(),
        train: Default::default(),
        memory: MemoryConfig::Ocm(desk_ocm()),
        expansion: Default::default(),
        eval: Default::default(),
        classifier: Default::default(),
    }
}

pub fn desk_ocm() -> OcmConfig {
    OcmConfig {
        lambda: 0.3,
        alpha: 1.0,
        stm_capacity: DESK_STM,
        ltm_cap: Some(DESK_LTM_CAP),
        ..OcmConfig::default()
    }
}

/// Class-incremental four-mode Gaussian mixture stream for the generative
/// comparison, with OCM memory.
pub fn gmm4_ocm(seed: u64) -> ExperimentConfig {
    let src = gmm_source(4, 8, 500, 6.0, 0.0, rng::derive_seed(seed, 0xDA7A, 0));
    let mut c = base("gmm4-ocm", seed, vec![src]);
    c.train.updates_per_batch = 5;
    c.train.adam.lr = 3e-3;
    c
}

/// Same stream and learner with a random-removal buffer of equal budget.
pub fn gmm4_random(seed: u64) -> ExperimentConfig {
    let mut c = gmm4_ocm(seed);
    c.name = "gmm4-random".into();
    c.memory = MemoryConfig::RandomRemoval {
        capacity: DESK_BUDGET,
    };
    c
}

/// Two far-apart domains streamed back to back, dynamic mixture learner.
pub fn two_domain_mixture(seed: u64) -> ExperimentConfig {
    let a = gmm_source(2, 8, 400, 10.0, 0.0, rng::derive_seed(seed, 0xDA7A, 1));
    let b = gmm_source(2, 8, 400, 10.0, 20.0, rng::derive_seed(seed, 0xDA7A, 2));
    let mut c = base("two-domain-mixture", seed, vec![a, b]);
    c.learner = LearnerKind::VaeMixture;
    c.expansion.enabled = true;
    c.train.updates_per_batch = 5;
    c.train.adam.lr = 3e-3;
    c
}

/// Four-class labeled stream for the classifier comparison.
pub fn gmm4_classifier_ocm(seed: u64) -> ExperimentConfig {
    let src = gmm_source(4, 8, 300, 4.0, 0.0, rng::derive_seed(seed, 0xDA7A, 3));
    let mut c = base("gmm4-classifier-ocm", seed, vec![src]);
    c.learner = LearnerKind::Classifier;
    c.train.updates_per_batch = 3;
    c.eval.diagnostics = false;
    c
}

pub fn gmm4_classifier_reservoir(seed: u64) -> ExperimentConfig {
    let mut c = gmm4_classifier_ocm(seed);
    c.name = "gmm4-classifier-reservoir".into();
    c.memory = MemoryConfig::Reservoir {
        capacity: DESK_BUDGET,
    };
    c
}

/// Small fast configuration for smoke tests and persistence checks.
pub fn tiny(seed: u64) -> ExperimentConfig {
    let src = gmm_source(2, 4, 60, 4.0, 0.0, rng::derive_seed(seed, 0xDA7A, 4));
    let mut c = base("tiny", seed, vec![src]);
    c.memory = MemoryConfig::Ocm(OcmConfig {
        stm_capacity: 20,
        ltm_cap: Some(40),
        ..desk_ocm()
    });
    c.eval.iwae_m = 20;
    c.eval.diag_samples = 20;
    c.eval.diag.elbo_samples = 2;
    c.model.encoder_hidden = vec![8];
    c.model.decoder_hidden = vec![8];
    c
}

pub fn by_name(name: &str, seed: u64) -> Option<ExperimentConfig> {
    Some(match name {
        "gmm4-ocm" => gmm4_ocm(seed),
        "gmm4-random" => gmm4_random(seed),
        "two-domain-mixture" => two_domain_mixture(seed),
        "gmm4-classifier-ocm" => gmm4_classifier_ocm(seed),
        "gmm4-classifier-reservoir" => gmm4_classifier_reservoir(seed),
        "tiny" => tiny(seed),
        _ => return None,
    })
}

pub const NAMES: &[&str] = &[
    "gmm4-ocm",
    "gmm4-random",
    "two-domain-mixture",
    "gmm4-classifier-ocm",
    "gmm4-classifier-reservoir",
    "tiny",
];
