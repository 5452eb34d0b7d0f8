//! Inference-time optimization of initial noise for diverse generation.
//!
//! A batch of initial noises is pushed through a frozen differentiable
//! generator; a set-level diversity statistic, a per-image reward and a
//! radius prior on each noise combine into a hinge-penalized loss whose
//! gradient is descended directly in noise space.

pub mod bridge;
pub mod diffengine;
pub mod diversity;
pub mod error;
pub mod features;
pub mod generator;
pub mod noise_init;
pub mod numerics;
pub mod objective;
pub mod optimizer;
pub mod regularizer;
pub mod spectra;

pub use error::{BridgeError, Error, Result};
pub use numerics::{SeededRng, Tensor};
