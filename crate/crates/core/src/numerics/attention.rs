use serde::{Deserialize, Serialize};

use super::ops::softmax_in_place;
use super::tensor::dot;
use super::{NumericsError, Tensor2};

/// Single-head self-attention projections, all `d × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub query: Tensor2,
    pub key: Tensor2,
    pub value: Tensor2,
    pub output: Tensor2,
}

impl AttentionWeights {
    pub fn dim(&self) -> usize {
        self.query.rows()
    }

    fn validate(&self, tokens: &Tensor2) -> Result<(), NumericsError> {
        let d = tokens.cols();
        for w in [&self.query, &self.key, &self.value, &self.output] {
            if w.shape() != (d, d) {
                return Err(NumericsError::Shape {
                    op: "attention_forward",
                    left: tokens.shape(),
                    right: w.shape(),
                });
            }
        }
        if tokens.rows() == 0 || d == 0 {
            return Err(NumericsError::Degenerate {
                op: "attention_forward",
                reason: "empty token block",
            });
        }
        Ok(())
    }
}

/// Intermediates kept by the forward pass for [`attention_backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub query: Tensor2,
    pub key: Tensor2,
    pub value: Tensor2,
    /// Row-stochastic attention matrix, `n × n`.
    pub weights: Tensor2,
    pub mixed: Tensor2,
}

/// `tokens + softmax(Q·Kᵀ/√d)·V·Wo`
pub fn attention_forward(tokens: &Tensor2, w: &AttentionWeights) -> Result<Tensor2, NumericsError> {
    attention_forward_cached(tokens, w).map(|(out, _)| out)
}

pub fn attention_forward_cached(
    tokens: &Tensor2,
    w: &AttentionWeights,
) -> Result<(Tensor2, AttentionCache), NumericsError> {
    w.validate(tokens)?;
    let scale = 1.0 / (tokens.cols() as f64).sqrt();
    let query = tokens.matmul(&w.query)?;
    let key = tokens.matmul(&w.key)?;
    let value = tokens.matmul(&w.value)?;
    let mut weights = query.matmul_t(&key)?;
    weights.scale(scale);
    for r in 0..weights.rows() {
        softmax_in_place(weights.row_mut(r));
    }
    let mixed = weights.matmul(&value)?;
    let mut out = mixed.matmul(&w.output)?;
    out.add_assign(tokens)?;
    let out = out.ensure_finite("attention_forward")?;
    Ok((
        out,
        AttentionCache {
            query,
            key,
            value,
            weights,
            mixed,
        },
    ))
}

/// Gradient with respect to the input tokens. The projection weights are
/// frozen, so no weight gradients are produced.
pub fn attention_backward(
    cache: &AttentionCache,
    w: &AttentionWeights,
    d_out: &Tensor2,
) -> Result<Tensor2, NumericsError> {
    let n = cache.weights.rows();
    let scale = 1.0 / (w.dim() as f64).sqrt();

    let d_mixed = d_out.matmul_t(&w.output)?;
    let d_attn = d_mixed.matmul_t(&cache.value)?;
    let d_value = cache.weights.t_matmul(&d_mixed)?;

    // softmax backward, row by row
    let mut d_scores = Tensor2::zeros(n, n);
    for r in 0..n {
        let a = cache.weights.row(r);
        let g = d_attn.row(r);
        let inner = dot(a, g);
        for (c, out) in d_scores.row_mut(r).iter_mut().enumerate() {
            *out = a[c] * (g[c] - inner) * scale;
        }
    }
    let d_query = d_scores.matmul(&cache.key)?;
    let d_key = d_scores.t_matmul(&cache.query)?;

    let mut d_tokens = d_out.clone();
    d_tokens.add_assign(&d_query.matmul_t(&w.query)?)?;
    d_tokens.add_assign(&d_key.matmul_t(&w.key)?)?;
    d_tokens.add_assign(&d_value.matmul_t(&w.value)?)?;
    d_tokens.ensure_finite("attention_backward")
}
