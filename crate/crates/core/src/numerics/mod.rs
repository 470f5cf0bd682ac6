//! Dense `f64` linear algebra and the hand-derived forward/backward passes for
//! the one fixed compute graph this lab trains:
//!
//! ```text
//! tokens ─┐
//!         ├─ concat ─ attention block (+residual) ─ mean-pool ─ linear head ─ CE
//! prompt ─┘                                                    (+ cosine alignment on the prompt)
//! ```
//!
//! There is no general autodiff here. Each layer exposes a forward that
//! caches what its backward needs, and [`graph`] chains them.

mod adam;
mod attention;
pub mod graph;
mod ops;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use attention::{attention_backward, attention_forward, attention_forward_cached, AttentionCache, AttentionWeights};
pub use ops::{
    cosine_align_grad, cosine_align_loss, cross_entropy, cross_entropy_grad, linear_forward, masked_cross_entropy_grad,
    softmax_rows,
};
pub use tensor::Tensor2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: left operand is {}×{}, right operand is {}×{}", .left.0, .left.1, .right.0, .right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label {label} is masked out of the active class set")]
    LabelMasked { label: usize },
    #[error("degenerate input to {op}: {reason}")]
    Degenerate { op: &'static str, reason: &'static str },
    #[error("no gradient was recorded for {0}")]
    NotRecorded(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}
