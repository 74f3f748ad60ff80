//! Model-parallel margin softmax with positive-plus-random-negative class
//! sampling, simulated over in-process workers, plus a memory planner for
//! the class-center layer.

#[cfg(feature = "cli")]
pub mod cli;
pub mod collectives;
pub mod dataio;
pub mod engine;
pub mod error;
pub mod margin_loss;
pub mod memcost;
pub mod numerics;
pub mod sampler;
pub mod verify;

pub use error::{Error, Result};
