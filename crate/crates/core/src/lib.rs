//! Desk-scale laboratory for task-imbalanced continual learning with
//! dynamically anchored prompts.
//!
//! - [`numerics`]: dense tensors, layer forward/backward, Adam.
//! - [`backbone`]: the frozen encoder and the trainable prompt/head types.
//! - [`streams`]: long-tail task streams and their file format.
//! - [`dap`]: two-phase anchored prompt training and its ablations.
//! - [`eval`]: accuracy matrix, plasticity/forgetting, A_N/A_L, linear probe.

pub mod backbone;
pub mod dap;
mod error;
pub mod eval;
pub mod fingerprint;
pub mod numerics;
pub mod streams;

pub use error::{Error, Result};
