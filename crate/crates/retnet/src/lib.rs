//! Retention-based sequence modeling with three equivalent computation
//! paths, plus a parameter-matched softmax-attention baseline.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod ops;
pub mod model;
pub mod msr;
pub mod retention;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Rng, Tensor};
