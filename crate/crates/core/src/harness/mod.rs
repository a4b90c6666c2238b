//! Experiment orchestration: configuration, the streaming loop, evaluation,
//! classifier mode, checkpoints and metric files.

mod checkpoint;
mod classifier;
mod config;
mod diag;
mod learner;
mod metrics;
pub mod presets;
mod run;

pub use checkpoint::{Checkpoint, MemoryState, RngStates, Window, FORMAT_VERSION};
pub use classifier::Classifier;
pub use config::{
    ClassifierConfig, EvalConfig, ExpansionConfig, ExperimentConfig, LearnerKind, MemoryConfig,
    ModelConfig, TrainConfig, DEFAULT_LAMBDA2,
};
pub use diag::{
    bound_records, diagnostics, is_theorem1_family, matrix_digest, split_targets, target_mixture,
    transport_record,
};
pub use learner::{evaluate_nll, evaluate_reconstruction, Learner};
pub use metrics::{
    parse_ndjson, summary_csv, to_ndjson, BoundRecord, EvalRecord, FinalRecord, LemmaRecord,
    Record, TransportRecord, SUMMARY_HEADER,
};
pub use run::{
    resume_experiment, run_classifier_mode, run_experiment, RunOutput, Runner, CHECKPOINT_FILE,
    CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, TIMINGS_FILE,
};
