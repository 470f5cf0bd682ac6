//! Frozen feature pathway: a fixed-seed slice embedder feeding one frozen
//! attention block, with the prompt and classifier head as the only trainable
//! pieces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::numerics::graph::{self, Encoded};
use crate::numerics::{AttentionWeights, NumericsError, Tensor2};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Raw sample dimension.
    pub input_dim: usize,
    /// Feature tokens per sample; each embeds a contiguous slice of the input.
    pub token_count: usize,
    pub embed_dim: usize,
    pub prompt_len: usize,
    pub num_classes_total: usize,
    pub freeze_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            token_count: 4,
            embed_dim: 16,
            prompt_len: 4,
            num_classes_total: 20,
            freeze_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_count == 0 {
            return Err(Error::config("backbone.token_count must be at least 1"));
        }
        if self.input_dim == 0 || self.input_dim % self.token_count != 0 {
            return Err(Error::config(format!(
                "backbone.input_dim ({}) must be a positive multiple of backbone.token_count ({})",
                self.input_dim, self.token_count
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("backbone.embed_dim must be at least 2"));
        }
        if self.prompt_len == 0 {
            return Err(Error::config("backbone.prompt_len must be at least 1"));
        }
        if self.num_classes_total == 0 {
            return Err(Error::config("backbone.num_classes_total must be at least 1"));
        }
        Ok(())
    }

    pub fn slice_len(&self) -> usize {
        self.input_dim / self.token_count
    }
}

/// Immutable random "pretrained" encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    embeddings: Vec<Tensor2>,
    attention: AttentionWeights,
    fingerprint: String,
}

/// Draws every frozen weight from `N(0, 1/d)` using `freeze_seed`.
pub fn init_backbone(config: &BackboneConfig) -> Result<FrozenBackbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.freeze_seed);
    let d = config.embed_dim;
    let std = 1.0 / (d as f64).sqrt();
    let embeddings = (0..config.token_count)
        .map(|_| Tensor2::random_normal(config.slice_len(), d, std, &mut rng))
        .collect();
    let attention = AttentionWeights {
        query: Tensor2::random_normal(d, d, std, &mut rng),
        key: Tensor2::random_normal(d, d, std, &mut rng),
        value: Tensor2::random_normal(d, d, std, &mut rng),
        output: Tensor2::random_normal(d, d, std, &mut rng),
    };
    Ok(FrozenBackbone::from_parts(config.clone(), embeddings, attention))
}

impl FrozenBackbone {
    /// Assembles a backbone from explicit weights. Used by tests that need
    /// constructed (e.g. degenerate-attention) encoders.
    pub fn from_parts(config: BackboneConfig, embeddings: Vec<Tensor2>, attention: AttentionWeights) -> Self {
        let mut backbone = Self {
            config,
            embeddings,
            attention,
            fingerprint: String::new(),
        };
        backbone.fingerprint = backbone.compute_fingerprint();
        backbone
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &[Tensor2] {
        &self.embeddings
    }

    pub fn attention(&self) -> &AttentionWeights {
        &self.attention
    }

    /// Hash recorded at construction.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Rehashes the current weights; equals [`Self::fingerprint`] as long as
    /// nothing has touched the frozen tensors.
    pub fn compute_fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new();
        let c = &self.config;
        for v in [c.input_dim, c.token_count, c.embed_dim, c.prompt_len, c.num_classes_total] {
            fp.u64(v as u64);
        }
        fp.u64(c.freeze_seed);
        for e in &self.embeddings {
            fp.f64s(e.data());
        }
        let a = &self.attention;
        for w in [&a.query, &a.key, &a.value, &a.output] {
            fp.f64s(w.data());
        }
        fp.finish()
    }

    /// Maps a raw sample to `token_count × embed_dim` tokens; token `i`
    /// depends only on input slice `i`.
    pub fn tokenize(&self, x: &[f64]) -> Result<Tensor2> {
        if x.len() != self.config.input_dim {
            return Err(NumericsError::Shape {
                op: "tokenize",
                left: (1, x.len()),
                right: (1, self.config.input_dim),
            }
            .into());
        }
        let s = self.config.slice_len();
        let d = self.config.embed_dim;
        let mut tokens = Tensor2::zeros(self.config.token_count, d);
        for (i, embed) in self.embeddings.iter().enumerate() {
            let slice = &x[i * s..(i + 1) * s];
            let row = tokens.row_mut(i);
            for (k, &xv) in slice.iter().enumerate() {
                for (t, w) in row.iter_mut().zip(embed.row(k)) {
                    *t += xv * w;
                }
            }
        }
        Ok(tokens)
    }

    /// Mean-pooled encoder output over `[prompt ; tokens]`.
    pub fn represent(&self, prompt: Option<&PromptVector>, tokens: &Tensor2) -> Result<Tensor2> {
        self.check_prompt(prompt)?;
        Ok(graph::represent(&self.attention, prompt.map(|p| p.values()), tokens)?)
    }

    /// Representation and logits for one tokenized sample.
    pub fn forward_with_prompt(
        &self,
        prompt: &PromptVector,
        tokens: &Tensor2,
        head: &ClassifierHead,
    ) -> Result<(Tensor2, Tensor2)> {
        self.check_prompt(Some(prompt))?;
        head.check(&self.config)?;
        let Encoded { representation, logits } =
            graph::forward(&self.attention, Some(prompt.values()), tokens, &head.weight, &head.bias)?;
        Ok((representation, logits))
    }

    fn check_prompt(&self, prompt: Option<&PromptVector>) -> Result<()> {
        if let Some(p) = prompt {
            let expected = (self.config.prompt_len, self.config.embed_dim);
            if p.values().shape() != expected {
                return Err(NumericsError::Shape {
                    op: "forward_with_prompt(prompt)",
                    left: p.values().shape(),
                    right: expected,
                }
                .into());
            }
        }
        Ok(())
    }
}

/// A block of `prompt_len` trainable tokens in embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptVector(Tensor2);

impl PromptVector {
    pub fn new(values: Tensor2) -> Self {
        Self(values)
    }

    pub fn random<R: rand::Rng + ?Sized>(len: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Self(Tensor2::random_normal(len, dim, std, rng))
    }

    pub fn values(&self) -> &Tensor2 {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Tensor2 {
        &mut self.0
    }

    pub fn into_inner(self) -> Tensor2 {
        self.0
    }
}

/// Single linear head over every class of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl ClassifierHead {
    pub fn zeros(embed_dim: usize, num_classes: usize) -> Self {
        Self {
            weight: Tensor2::zeros(embed_dim, num_classes),
            bias: Tensor2::zeros(1, num_classes),
        }
    }

    pub fn for_config(config: &BackboneConfig) -> Self {
        Self::zeros(config.embed_dim, config.num_classes_total)
    }

    pub fn num_classes(&self) -> usize {
        self.bias.cols()
    }

    fn check(&self, config: &BackboneConfig) -> Result<()> {
        let expected = (config.embed_dim, config.num_classes_total);
        if self.weight.shape() != expected || self.bias.shape() != (1, config.num_classes_total) {
            return Err(NumericsError::Shape {
                op: "classifier_head",
                left: self.weight.shape(),
                right: expected,
            }
            .into());
        }
        Ok(())
    }
}
