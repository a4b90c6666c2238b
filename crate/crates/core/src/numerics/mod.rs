//! Dense linear algebra, feed-forward networks, Adam and gradient checking.

mod adam;
mod gradcheck;
mod matrix;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use matrix::{dot, log_sum_exp, squared_distance, DenseMatrix};
pub use mlp::{sigmoid, softplus, Activation, ForwardCache, Layer, MlpParams};
