pub mod error;
pub mod expansion;
pub mod harness;
pub mod memory;
pub mod numerics;
pub mod ot;
pub mod rng;
pub mod stream;
pub mod vae;

pub use error::{Error, Result};
