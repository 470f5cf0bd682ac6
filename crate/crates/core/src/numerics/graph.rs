//! The training graph `[prompt ; tokens] → attention → mean-pool → head`,
//! its scalar objectives, and exact reverse-mode gradients for the trainable
//! tensors (prompt, head weight, head bias).

use std::fmt;

use super::attention::{attention_backward, attention_forward_cached, AttentionWeights};
use super::ops::{cosine_align_grad, linear_forward, masked_cross_entropy_grad};
use super::{NumericsError, Tensor2};

/// Names every tensor that takes part in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TensorId {
    Prompt,
    HeadWeight,
    HeadBias,
    /// Frozen per-token embedding map.
    Embedding(usize),
    Query,
    Key,
    Value,
    Output,
    /// Alignment anchors are constants of the objective.
    Anchor(usize),
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorId::Prompt => write!(f, "prompt"),
            TensorId::HeadWeight => write!(f, "head weight"),
            TensorId::HeadBias => write!(f, "head bias"),
            TensorId::Embedding(i) => write!(f, "embedding[{i}] (frozen)"),
            TensorId::Query => write!(f, "attention query (frozen)"),
            TensorId::Key => write!(f, "attention key (frozen)"),
            TensorId::Value => write!(f, "attention value (frozen)"),
            TensorId::Output => write!(f, "attention output (frozen)"),
            TensorId::Anchor(i) => write!(f, "alignment anchor[{i}] (constant)"),
        }
    }
}

/// One training example already tokenized by the frozen embedder.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub tokens: &'a Tensor2,
    pub label: usize,
}

/// `coef · (1 − cos(prompt, anchor))`, with the anchor held constant.
#[derive(Clone, Copy, Debug)]
pub struct Alignment<'a> {
    pub coef: f64,
    pub anchor: &'a Tensor2,
}

/// Scalar objective: batch-mean cross-entropy (optional) plus weighted
/// alignment terms on the prompt.
#[derive(Clone, Debug, Default)]
pub struct Objective<'a> {
    pub cross_entropy: bool,
    pub alignments: Vec<Alignment<'a>>,
    /// Classes allowed to compete in the softmax; `None` means all.
    pub active_classes: Option<&'a [bool]>,
}

impl<'a> Objective<'a> {
    pub fn cross_entropy_only(active_classes: Option<&'a [bool]>) -> Self {
        Self {
            cross_entropy: true,
            alignments: Vec::new(),
            active_classes,
        }
    }

    pub fn with_alignment(mut self, coef: f64, anchor: &'a Tensor2) -> Self {
        self.alignments.push(Alignment { coef, anchor });
        self
    }
}

/// Borrowed view of the tensors a training phase optimizes.
#[derive(Clone, Copy, Debug)]
pub struct Trainables<'a> {
    pub prompt: &'a Tensor2,
    pub head_weight: &'a Tensor2,
    pub head_bias: &'a Tensor2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub alignment: f64,
}

/// Gradients for the trainable tensors only.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub prompt: Tensor2,
    pub head_weight: Tensor2,
    pub head_bias: Tensor2,
}

impl Gradients {
    fn zeros_like(params: &Trainables<'_>) -> Self {
        Self {
            prompt: Tensor2::zeros(params.prompt.rows(), params.prompt.cols()),
            head_weight: Tensor2::zeros(params.head_weight.rows(), params.head_weight.cols()),
            head_bias: Tensor2::zeros(params.head_bias.rows(), params.head_bias.cols()),
        }
    }

    /// Gradient of a recorded trainable. Frozen weights and constant anchors
    /// were never recorded and yield [`NumericsError::NotRecorded`].
    pub fn get(&self, id: TensorId) -> Result<&Tensor2, NumericsError> {
        match id {
            TensorId::Prompt => Ok(&self.prompt),
            TensorId::HeadWeight => Ok(&self.head_weight),
            TensorId::HeadBias => Ok(&self.head_bias),
            other => Err(NumericsError::NotRecorded(other.to_string())),
        }
    }
}

/// Output of the encoder for one sample.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub representation: Tensor2,
    pub logits: Tensor2,
}

/// Forward pass for a single sample. With `prompt = None` the encoder sees
/// only the feature tokens.
pub fn forward(
    frozen: &AttentionWeights,
    prompt: Option<&Tensor2>,
    tokens: &Tensor2,
    head_weight: &Tensor2,
    head_bias: &Tensor2,
) -> Result<Encoded, NumericsError> {
    let representation = represent(frozen, prompt, tokens)?;
    let logits = linear_forward(&representation, head_weight, head_bias)?;
    Ok(Encoded { representation, logits })
}

/// Mean-pooled encoder output, `1 × d`.
pub fn represent(frozen: &AttentionWeights, prompt: Option<&Tensor2>, tokens: &Tensor2) -> Result<Tensor2, NumericsError> {
    let input = match prompt {
        Some(p) => Tensor2::vstack(p, tokens)?,
        None => tokens.clone(),
    };
    let (out, _) = attention_forward_cached(&input, frozen)?;
    Ok(out.mean_rows())
}

/// Objective value and exact gradients for the prompt and head.
///
/// Cross-entropy is mean-reduced over the batch; alignment terms are added
/// once per batch. Terms with a zero coefficient are not evaluated.
pub fn loss_and_gradients(
    frozen: &AttentionWeights,
    params: Trainables<'_>,
    batch: &[Sample<'_>],
    objective: &Objective<'_>,
) -> Result<(LossBreakdown, Gradients), NumericsError> {
    let mut grads = Gradients::zeros_like(&params);
    let mut breakdown = LossBreakdown::default();

    if objective.cross_entropy {
        if batch.is_empty() {
            return Err(NumericsError::Degenerate {
                op: "loss_and_gradients",
                reason: "empty batch",
            });
        }
        let inv_batch = 1.0 / batch.len() as f64;
        let prompt_rows = params.prompt.rows();
        for sample in batch {
            let input = Tensor2::vstack(params.prompt, sample.tokens)?;
            let rows = input.rows();
            let (out, cache) = attention_forward_cached(&input, frozen)?;
            let representation = out.mean_rows();
            let logits = linear_forward(&representation, params.head_weight, params.head_bias)?;
            let (ce, mut d_logits) = masked_cross_entropy_grad(&logits, &[sample.label], objective.active_classes)?;
            d_logits.scale(inv_batch);
            breakdown.cross_entropy += ce * inv_batch;

            grads.head_weight.add_assign(&representation.t_matmul(&d_logits)?)?;
            grads.head_bias.add_assign(&d_logits)?;

            let d_repr = d_logits.matmul_t(params.head_weight)?;
            let mut d_out = Tensor2::zeros(rows, d_repr.cols());
            let inv_rows = 1.0 / rows as f64;
            for r in 0..rows {
                for (o, g) in d_out.row_mut(r).iter_mut().zip(d_repr.data()) {
                    *o = g * inv_rows;
                }
            }
            let d_input = attention_backward(&cache, frozen, &d_out)?;
            for r in 0..prompt_rows {
                for (g, d) in grads.prompt.row_mut(r).iter_mut().zip(d_input.row(r)) {
                    *g += d;
                }
            }
        }
    }

    for term in &objective.alignments {
        if term.coef == 0.0 {
            continue;
        }
        let (la, g) = cosine_align_grad(params.prompt, term.anchor)?;
        breakdown.alignment += term.coef * la;
        grads.prompt.axpy(term.coef, &g)?;
    }

    breakdown.total = breakdown.cross_entropy + breakdown.alignment;
    if !breakdown.total.is_finite() {
        return Err(NumericsError::NonFinite { op: "loss_and_gradients" });
    }
    Ok((breakdown, grads))
}

/// Objective value only; same reduction as [`loss_and_gradients`].
pub fn loss(
    frozen: &AttentionWeights,
    params: Trainables<'_>,
    batch: &[Sample<'_>],
    objective: &Objective<'_>,
) -> Result<f64, NumericsError> {
    let mut total = 0.0;
    if objective.cross_entropy {
        if batch.is_empty() {
            return Err(NumericsError::Degenerate {
                op: "loss",
                reason: "empty batch",
            });
        }
        for sample in batch {
            let enc = forward(frozen, Some(params.prompt), sample.tokens, params.head_weight, params.head_bias)?;
            let (ce, _) = masked_cross_entropy_grad(&enc.logits, &[sample.label], objective.active_classes)?;
            total += ce;
        }
        total /= batch.len() as f64;
    }
    for term in &objective.alignments {
        if term.coef == 0.0 {
            continue;
        }
        total += term.coef * super::ops::cosine_align_loss(params.prompt, term.anchor)?;
    }
    Ok(total)
}

/// Cross-entropy of a linear head over fixed features, with head gradients.
/// Used where the representation is frozen (linear probing).
pub fn linear_head_loss_and_gradients(
    features: &Tensor2,
    labels: &[usize],
    head_weight: &Tensor2,
    head_bias: &Tensor2,
) -> Result<(f64, Tensor2, Tensor2), NumericsError> {
    let logits = linear_forward(features, head_weight, head_bias)?;
    let (ce, d_logits) = masked_cross_entropy_grad(&logits, labels, None)?;
    let d_weight = features.t_matmul(&d_logits)?;
    let mut d_bias = Tensor2::zeros(1, head_bias.cols());
    for r in 0..d_logits.rows() {
        for (b, g) in d_bias.data_mut().iter_mut().zip(d_logits.row(r)) {
            *b += g;
        }
    }
    Ok((ce, d_weight, d_bias))
}
