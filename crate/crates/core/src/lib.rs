//! Hardware-aware adaptation of restoration networks by block surgery.
//!
//! The pipeline: train a base network, score block saliency, distill
//! hardware-friendly surrogate blocks, then search substitutions with
//! multi-objective Bayesian optimisation over accuracy loss and a latency
//! penalty.

pub mod distill;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod par;
pub mod profile;
pub mod saliency;
pub mod search;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod toynet;

pub use error::{Error, ProfileError, Result};
pub use tape::{ElementwiseKind, Gradients, Operand, Tape, Var};
pub use tensor::Tensor;
