//! Short-/long-term memories, kernel diversity selection and baseline buffers.

mod baseline;
mod buffer;
mod kernel;
mod ocm;

pub use baseline::{baseline_update, BaselinePolicy};
pub use buffer::{BufferKind, MemoryBuffer};
pub use kernel::{diversity_scores, kernel_similarity, similarity_matrix, SimilarityMatrix};
pub use ocm::{
    enforce_ltm_cap, select_transfer, stm_append, training_minibatch, OcmConfig, OcmMemory,
    SelectionOutcome, Transfer, TransferDirection,
};
