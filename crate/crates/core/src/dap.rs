//! Dynamically anchored prompting.
//!
//! Every task runs two phases. Phase 1 fits a fresh task-specific prompt (the
//! boosting anchor) with cross-entropy. Its inverse-size-weighted running mean
//! over all tasks so far is the stabilizing anchor. Phase 2 trains the single
//! general prompt with cross-entropy plus cosine alignment to both anchors,
//! weighted by a factor λ that min-max normalizes the current task size
//! against the sizes seen so far. Only the general prompt, the head and the
//! constant-size anchor state survive between tasks.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ClassifierHead, FrozenBackbone, PromptVector};
use crate::error::{Error, Result};
use crate::eval::{argmax, AccuracyMatrix};
use crate::fingerprint::Fingerprinter;
use crate::numerics::graph::{self, Objective, Sample, Trainables};
use crate::numerics::{AdamConfig, AdamState, Tensor2};
use crate::streams::{Split, TaskStream};

/// Training variant. `Dap` is the full method; the rest are ablations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Dap,
    /// No anchors: phase 2 only, cross-entropy only.
    GeneralOnly,
    /// Phase 2 aligns only to the current task's prompt.
    BoostingOnly,
    /// Phase 2 aligns only to the stabilizing anchor.
    StabilizingOnly,
    /// DAP with a constant λ.
    FixedLambda(f64),
    /// Phase 1 only; task `j` is evaluated with its own stored prompt
    /// (oracle prompt selection).
    TaskSpecificOnly,
}

impl Mode {
    pub fn trains_boosting_prompt(self) -> bool {
        !matches!(self, Mode::GeneralOnly)
    }

    pub fn trains_general_prompt(self) -> bool {
        !matches!(self, Mode::TaskSpecificOnly)
    }

    /// Whether evaluation uses per-task stored prompts instead of `p_g`.
    pub fn uses_oracle_selection(self) -> bool {
        matches!(self, Mode::TaskSpecificOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Dap => f.write_str("dap"),
            Mode::GeneralOnly => f.write_str("general_only"),
            Mode::BoostingOnly => f.write_str("boosting_only"),
            Mode::StabilizingOnly => f.write_str("stabilizing_only"),
            Mode::FixedLambda(l) => write!(f, "fixed_lambda({l})"),
            Mode::TaskSpecificOnly => f.write_str("task_specific_only"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "dap" => Mode::Dap,
            "general_only" => Mode::GeneralOnly,
            "boosting_only" => Mode::BoostingOnly,
            "stabilizing_only" => Mode::StabilizingOnly,
            "task_specific_only" => Mode::TaskSpecificOnly,
            other => {
                let inner = other
                    .strip_prefix("fixed_lambda(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::config(format!("unknown mode `{other}`")))?;
                let l: f64 = inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad fixed λ in `{other}`")))?;
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::config(format!("fixed λ must lie in [0, 1], got {l}")));
                }
                Mode::FixedLambda(l)
            }
        };
        Ok(mode)
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

/// Which logits compete in the training softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMask {
    /// Only the classes of the task being trained (task identity is known
    /// during training).
    #[default]
    CurrentTask,
    /// Every class seen so far, including earlier tasks.
    SeenClasses,
}

/// Starting point of each task's boosting prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostingInit {
    /// Fresh `N(0, prompt_init_std²)` draw.
    #[default]
    Fresh,
    /// Copy of the general prompt as it stands when the task arrives.
    FromGeneral,
}

/// How λ maps onto the two alignment coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSemantics {
    /// `λ·L_a(p_g, p_s) + (1−λ)·L_a(p_g, p_b)`
    #[default]
    AsEquations,
    /// Coefficients swapped: large tasks weight the boosting anchor.
    AsProse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DapConfig {
    pub mode: Mode,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    /// Denominator guard in λ.
    pub epsilon: f64,
    pub adam: AdamConfig,
    /// Std of the Gaussian used to initialize prompts.
    pub prompt_init_std: f64,
    pub lambda_semantics: LambdaSemantics,
    pub training_mask: TrainingMask,
    pub boosting_init: BoostingInit,
    pub seed: u64,
}

impl Default for DapConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dap,
            epochs_phase1: 5,
            epochs_phase2: 5,
            batch_size: 32,
            epsilon: 1e-6,
            adam: AdamConfig::default(),
            prompt_init_std: 0.02,
            lambda_semantics: LambdaSemantics::AsEquations,
            training_mask: TrainingMask::CurrentTask,
            boosting_init: BoostingInit::Fresh,
            seed: 0,
        }
    }
}

impl DapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("dap.epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("dap.batch_size must be at least 1"));
        }
        if let Mode::FixedLambda(l) = self.mode {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("fixed λ must lie in [0, 1]"));
            }
        }
        if !(self.prompt_init_std > 0.0) {
            return Err(Error::config("dap.prompt_init_std must be positive"));
        }
        Ok(())
    }
}

/// Stabilizing anchor and the task-size statistics λ needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorState {
    pub stabilizing: PromptVector,
    /// `Σ 1/N_i` over the tasks folded in so far.
    pub weight_sum: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub tasks_seen: usize,
}

impl AnchorState {
    pub fn new(prompt_len: usize, dim: usize) -> Self {
        Self {
            stabilizing: PromptVector::new(Tensor2::zeros(prompt_len, dim)),
            weight_sum: 0.0,
            n_min: 0,
            n_max: 0,
            tasks_seen: 0,
        }
    }

    /// Records a task size without touching the stabilizing anchor.
    pub fn observe_size(&mut self, n_t: usize) -> Result<()> {
        if n_t == 0 {
            return Err(Error::stream("task size must be at least 1"));
        }
        if self.tasks_seen == 0 {
            self.n_min = n_t;
            self.n_max = n_t;
        } else {
            self.n_min = self.n_min.min(n_t);
            self.n_max = self.n_max.max(n_t);
        }
        self.tasks_seen += 1;
        Ok(())
    }

    /// Folds a boosting anchor into the running `1/N`-weighted mean.
    pub fn fold(&mut self, boosting: &PromptVector, n_t: usize) -> Result<()> {
        if boosting.values().shape() != self.stabilizing.values().shape() {
            return Err(crate::numerics::NumericsError::Shape {
                op: "update_stabilizing_anchor",
                left: self.stabilizing.values().shape(),
                right: boosting.values().shape(),
            }
            .into());
        }
        let first = self.tasks_seen == 0;
        self.observe_size(n_t)?;
        let w_new = 1.0 / n_t as f64;
        if first {
            self.stabilizing = boosting.clone();
            self.weight_sum = w_new;
            return Ok(());
        }
        let total = self.weight_sum + w_new;
        let old = self.weight_sum;
        for (s, b) in self
            .stabilizing
            .values_mut()
            .data_mut()
            .iter_mut()
            .zip(boosting.values().data())
        {
            *s = (old * *s + w_new * b) / total;
        }
        self.weight_sum = total;
        Ok(())
    }
}

/// Functional form of [`AnchorState::fold`].
pub fn update_stabilizing_anchor(anchors: &AnchorState, boosting: &PromptVector, n_t: usize) -> Result<AnchorState> {
    let mut next = anchors.clone();
    next.fold(boosting, n_t)?;
    Ok(next)
}

/// `λ = (N_t − N_min) / (N_max − N_min + ε)`, with the extrema already
/// including the current task.
///
/// Evaluated as `1 − (N_max − N_t + ε) / (N_max − N_min + ε)`, which is exact
/// at `N_t = N_min` and keeps `λ ≥ 1 − ε / (N_max − N_min)` under rounding
/// at `N_t = N_max`.
pub fn compute_lambda(n_t: usize, anchors: &AnchorState, epsilon: f64) -> f64 {
    let span = anchors.n_max.saturating_sub(anchors.n_min) as f64 + epsilon;
    let below = anchors.n_max.saturating_sub(n_t) as f64 + epsilon;
    (1.0 - below / span).max(0.0)
}

/// Coefficients on the two alignment terms of the phase-2 loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWeights {
    pub stabilizing: f64,
    pub boosting: f64,
}

impl AlignmentWeights {
    pub const NONE: AlignmentWeights = AlignmentWeights {
        stabilizing: 0.0,
        boosting: 0.0,
    };

    pub fn from_lambda(lambda: f64, semantics: LambdaSemantics) -> Self {
        match semantics {
            LambdaSemantics::AsEquations => Self {
                stabilizing: lambda,
                boosting: 1.0 - lambda,
            },
            LambdaSemantics::AsProse => Self {
                stabilizing: 1.0 - lambda,
                boosting: lambda,
            },
        }
    }

    /// Coefficients a mode applies given the dynamic λ of the current task.
    pub fn for_mode(mode: Mode, lambda: f64, semantics: LambdaSemantics) -> Self {
        match mode {
            Mode::Dap => Self::from_lambda(lambda, semantics),
            Mode::FixedLambda(l) => Self::from_lambda(l, semantics),
            Mode::BoostingOnly => Self {
                stabilizing: 0.0,
                boosting: 1.0,
            },
            Mode::StabilizingOnly => Self {
                stabilizing: 1.0,
                boosting: 0.0,
            },
            Mode::GeneralOnly | Mode::TaskSpecificOnly => Self::NONE,
        }
    }
}

/// The phase-2 objective: batch-mean CE plus weighted alignments of the
/// prompt to the (constant) anchors.
pub fn phase2_objective<'a>(
    weights: AlignmentWeights,
    stabilizing: &'a PromptVector,
    boosting: &'a PromptVector,
    active: Option<&'a [bool]>,
) -> Objective<'a> {
    Objective::cross_entropy_only(active)
        .with_alignment(weights.stabilizing, stabilizing.values())
        .with_alignment(weights.boosting, boosting.values())
}

/// Train data of one task, tokenized once.
pub struct TokenizedSplit {
    pub samples: Vec<(Tensor2, usize)>,
}

impl TokenizedSplit {
    pub fn new(backbone: &FrozenBackbone, split: &Split) -> Result<Self> {
        let samples = split
            .iter()
            .map(|(x, y)| Ok((backbone.tokenize(x)?, y)))
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Minibatch Adam over `prompt` and `head`. Returns the mean objective of
/// each epoch. Optimizer moments start fresh.
#[allow(clippy::too_many_arguments)]
fn optimize(
    backbone: &FrozenBackbone,
    prompt: &mut PromptVector,
    head: &mut ClassifierHead,
    data: &TokenizedSplit,
    objective: &Objective<'_>,
    epochs: usize,
    config: &DapConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::stream("cannot train on an empty task"));
    }
    let mut opt_p = AdamState::for_param(prompt.values(), config.adam);
    let mut opt_w = AdamState::for_param(&head.weight, config.adam);
    let mut opt_b = AdamState::for_param(&head.bias, config.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let full_batch = config.batch_size >= data.len();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample<'_>> = chunk
                .iter()
                .map(|&i| Sample {
                    tokens: &data.samples[i].0,
                    label: data.samples[i].1,
                })
                .collect();
            let params = Trainables {
                prompt: prompt.values(),
                head_weight: &head.weight,
                head_bias: &head.bias,
            };
            let (loss, grads) = graph::loss_and_gradients(backbone.attention(), params, &batch, objective)?;
            opt_p.step(prompt.values_mut(), &grads.prompt)?;
            opt_w.step(&mut head.weight, &grads.head_weight)?;
            opt_b.step(&mut head.bias, &grads.head_bias)?;
            total += loss.total;
            batches += 1;
        }
        let mean = total / batches as f64;
        if full_batch {
            if let Some(&prev) = epoch_losses.last() {
                if mean > prev + 1e-6 {
                    log::warn!("full-batch loss rose from {prev:.6} to {mean:.6} at epoch {epoch}");
                }
            }
        }
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Phase 1: fit a freshly initialized task-specific prompt (and the shared
/// head) with cross-entropy on the current task.
pub fn train_phase1(
    backbone: &FrozenBackbone,
    data: &TokenizedSplit,
    head: &mut ClassifierHead,
    active: &[bool],
    general: &PromptVector,
    config: &DapConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PromptVector, Vec<f64>)> {
    let c = backbone.config();
    let fresh = PromptVector::random(c.prompt_len, c.embed_dim, config.prompt_init_std, rng);
    let mut prompt = match config.boosting_init {
        BoostingInit::Fresh => fresh,
        BoostingInit::FromGeneral => general.clone(),
    };
    let objective = Objective::cross_entropy_only(Some(active));
    let losses = optimize(backbone, &mut prompt, head, data, &objective, config.epochs_phase1, config, rng)?;
    Ok((prompt, losses))
}

/// Phase 2: update the general prompt and head with cross-entropy plus the
/// weighted anchor alignments. Anchors are constants.
#[allow(clippy::too_many_arguments)]
pub fn train_phase2(
    backbone: &FrozenBackbone,
    data: &TokenizedSplit,
    general: &mut PromptVector,
    head: &mut ClassifierHead,
    active: &[bool],
    weights: AlignmentWeights,
    stabilizing: &PromptVector,
    boosting: &PromptVector,
    config: &DapConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let objective = phase2_objective(weights, stabilizing, boosting, Some(active));
    optimize(backbone, general, head, data, &objective, config.epochs_phase2, config, rng)
}

/// Per-task record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub position: usize,
    pub task_id: usize,
    pub n_t: usize,
    /// λ from the task-size extrema (what `dap` mode uses).
    pub lambda: f64,
    /// Coefficients actually applied in phase 2.
    pub weights: AlignmentWeights,
    pub phase1_losses: Vec<f64>,
    pub phase2_losses: Vec<f64>,
}

/// What persists between tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualState {
    pub general: PromptVector,
    pub head: ClassifierHead,
    pub anchors: AnchorState,
    /// Stored per-task prompts; only populated by the oracle-selection
    /// baseline.
    pub oracle_prompts: Vec<PromptVector>,
    pub log: Vec<TaskLog>,
}

const STATE_MAGIC: &[u8; 4] = b"TDAP";
const STATE_VERSION: u16 = 1;

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor2) {
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_tensor(bytes: &[u8], at: &mut usize) -> Result<Tensor2> {
    let bad = |at: usize| Error::Format {
        offset: at as u64,
        reason: "truncated model state".into(),
    };
    let word = |at: usize| -> Result<usize> {
        let b = bytes.get(at..at + 4).ok_or_else(|| bad(at))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    let rows = word(*at)?;
    let cols = word(*at + 4)?;
    *at += 8;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let b = bytes.get(*at..*at + 8).ok_or_else(|| bad(*at))?;
        data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        *at += 8;
    }
    Ok(Tensor2::from_vec(rows, cols, data)?)
}

impl ContinualState {
    pub fn new(backbone: &FrozenBackbone, general: PromptVector) -> Self {
        let c = backbone.config();
        Self {
            general,
            head: ClassifierHead::for_config(c),
            anchors: AnchorState::new(c.prompt_len, c.embed_dim),
            oracle_prompts: Vec::new(),
            log: Vec::new(),
        }
    }

    /// Binary encoding of everything carried from one task to the next
    /// (`p_g`, head, anchor state, any stored prompts). The log is excluded.
    pub fn persistent_bytes(&self) -> Vec<u8> {
        let mut buf = self.model_state_bytes();
        put_tensor(&mut buf, self.anchors.stabilizing.values());
        buf.extend_from_slice(&self.anchors.weight_sum.to_le_bytes());
        for v in [self.anchors.n_min, self.anchors.n_max, self.anchors.tasks_seen] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(self.oracle_prompts.len() as u64).to_le_bytes());
        for p in &self.oracle_prompts {
            put_tensor(&mut buf, p.values());
        }
        buf
    }

    /// Model file contents: `"TDAP" | version u16 | p_g | head weight | head bias`,
    /// each tensor as `rows u32, cols u32, f64 × rows·cols`, little-endian.
    pub fn model_state_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
        put_tensor(&mut buf, self.general.values());
        put_tensor(&mut buf, &self.head.weight);
        put_tensor(&mut buf, &self.head.bias);
        buf
    }
}

/// Inverse of [`ContinualState::model_state_bytes`].
pub fn decode_model_state(bytes: &[u8]) -> Result<(PromptVector, ClassifierHead)> {
    if bytes.len() < 6 || &bytes[..4] != STATE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "not a model state file".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != STATE_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported model state version {version}"),
        });
    }
    let mut at = 6;
    let general = PromptVector::new(take_tensor(bytes, &mut at)?);
    let weight = take_tensor(bytes, &mut at)?;
    let bias = take_tensor(bytes, &mut at)?;
    Ok((general, ClassifierHead { weight, bias }))
}

/// Result of a full continual run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: ContinualState,
    pub matrix: AccuracyMatrix,
    /// `p_g` after each task, for representation probing.
    pub general_snapshots: Vec<PromptVector>,
    /// `persistent_bytes().len()` after each task.
    pub persistent_sizes: Vec<usize>,
}

/// RNG seed for a run, derived from the config seed and the stream
/// fingerprint. The mode is deliberately not mixed in, so ablation modes
/// share prompt initializations and batch orders.
pub fn run_seed(seed: u64, stream_fingerprint: &str) -> u64 {
    let mut fp = Fingerprinter::new();
    fp.u64(seed).bytes(stream_fingerprint.as_bytes());
    u64::from_str_radix(&fp.finish()[..16], 16).expect("hex")
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// substream ids
const GENERAL_INIT: u64 = 0;
const BOOSTING_INIT_BASE: u64 = 1 << 20;
const SHUFFLE_BASE: u64 = 2 << 20;

fn accuracy(backbone: &FrozenBackbone, prompt: &PromptVector, head: &ClassifierHead, data: &TokenizedSplit) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Metrics("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for (tokens, y) in &data.samples {
        let (_, logits) = backbone.forward_with_prompt(prompt, tokens, head)?;
        if argmax(logits.data()) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains through the whole stream and fills the accuracy matrix row by row.
pub fn run_continual(stream: &TaskStream, backbone: &FrozenBackbone, config: &DapConfig) -> Result<RunOutcome> {
    config.validate()?;
    let bc = backbone.config();
    if stream.params.input_dim != bc.input_dim {
        return Err(Error::config(format!(
            "stream input_dim {} does not match backbone input_dim {}",
            stream.params.input_dim, bc.input_dim
        )));
    }
    if stream.spec.num_classes > bc.num_classes_total {
        return Err(Error::config(format!(
            "stream has {} classes but the head has {}",
            stream.spec.num_classes, bc.num_classes_total
        )));
    }
    let frozen_fp = backbone.fingerprint().to_owned();
    let seed = run_seed(config.seed, stream.fingerprint());
    let mode = config.mode;

    let test: Vec<TokenizedSplit> = (0..stream.num_tasks())
        .map(|p| TokenizedSplit::new(backbone, &stream.test_split(p)))
        .collect::<Result<_>>()?;

    let mut init_rng = rng_for(seed, GENERAL_INIT);
    let general = PromptVector::random(bc.prompt_len, bc.embed_dim, config.prompt_init_std, &mut init_rng);
    let mut state = ContinualState::new(backbone, general);
    let mut matrix = AccuracyMatrix::new(stream.num_tasks());
    let mut general_snapshots = Vec::with_capacity(stream.num_tasks());
    let mut persistent_sizes = Vec::with_capacity(stream.num_tasks());
    let mut active = vec![false; bc.num_classes_total];

    for (pos, (task, split)) in stream.tasks.iter().zip(&stream.train).enumerate() {
        if split.is_empty() {
            return Err(Error::stream(format!("task at position {pos} has no samples")));
        }
        let data = TokenizedSplit::new(backbone, split)?;
        if config.training_mask == TrainingMask::CurrentTask {
            active.iter_mut().for_each(|a| *a = false);
        }
        for &c in &task.class_ids {
            active[c] = true;
        }
        let n_t = task.total_size;

        let mut phase1_losses = Vec::new();
        let boosting = if mode.trains_boosting_prompt() {
            let mut rng = rng_for(seed, BOOSTING_INIT_BASE + pos as u64);
            let (p_b, losses) = train_phase1(backbone, &data, &mut state.head, &active, &state.general, config, &mut rng)?;
            phase1_losses = losses;
            state.anchors.fold(&p_b, n_t)?;
            Some(p_b)
        } else {
            state.anchors.observe_size(n_t)?;
            None
        };

        let lambda = compute_lambda(n_t, &state.anchors, config.epsilon);
        let weights = AlignmentWeights::for_mode(mode, lambda, config.lambda_semantics);

        let mut phase2_losses = Vec::new();
        if mode.trains_general_prompt() {
            let mut rng = rng_for(seed, SHUFFLE_BASE + pos as u64);
            // general_only has no anchors; its weights are zero so these are never read
            let boosting_ref = boosting.as_ref().unwrap_or(&state.anchors.stabilizing);
            let stabilizing = state.anchors.stabilizing.clone();
            phase2_losses = train_phase2(
                backbone,
                &data,
                &mut state.general,
                &mut state.head,
                &active,
                weights,
                &stabilizing,
                boosting_ref,
                config,
                &mut rng,
            )?;
        }
        if mode.uses_oracle_selection() {
            state.oracle_prompts.push(boosting.expect("phase 1 ran"));
        }

        for (j, test_j) in test.iter().enumerate().take(pos + 1) {
            let prompt = if mode.uses_oracle_selection() {
                &state.oracle_prompts[j]
            } else {
                &state.general
            };
            matrix.set(pos, j, accuracy(backbone, prompt, &state.head, test_j)?)?;
        }

        if backbone.compute_fingerprint() != frozen_fp {
            return Err(Error::stream(format!("frozen backbone changed during task {pos}")));
        }
        state.log.push(TaskLog {
            position: pos,
            task_id: task.task_id,
            n_t,
            lambda,
            weights,
            phase1_losses,
            phase2_losses,
        });
        general_snapshots.push(state.general.clone());
        persistent_sizes.push(state.persistent_bytes().len());
    }

    Ok(RunOutcome {
        state,
        matrix,
        general_snapshots,
        persistent_sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, i: usize) -> PromptVector {
        let mut t = Tensor2::zeros(1, dim);
        t.set(0, i, 1.0);
        PromptVector::new(t)
    }

    #[test]
    fn first_fold_copies_the_boosting_anchor() {
        let p = PromptVector::new(Tensor2::from_rows(&[&[0.3, -1.0, 2.0]]));
        let a = update_stabilizing_anchor(&AnchorState::new(1, 3), &p, 977).unwrap();
        assert_eq!(a.stabilizing, p);
        assert_eq!((a.n_min, a.n_max, a.tasks_seen), (977, 977, 1));
    }

    #[test]
    fn equal_sizes_average_evenly() {
        let mut a = AnchorState::new(1, 2);
        a.fold(&unit(2, 0), 50).unwrap();
        a.fold(&unit(2, 1), 50).unwrap();
        assert!(a.stabilizing.values().max_abs_diff(&Tensor2::row_vector(&[0.5, 0.5])) < 1e-15);
    }

    #[test]
    fn smaller_tasks_weigh_more() {
        let mut a = AnchorState::new(1, 2);
        a.fold(&unit(2, 0), 100).unwrap();
        a.fold(&unit(2, 1), 300).unwrap();
        // (e1/100 + e2/300) / (1/100 + 1/300) = (3 e1 + e2) / 4
        assert!(a.stabilizing.values().max_abs_diff(&Tensor2::row_vector(&[0.75, 0.25])) < 1e-12);
        assert!((a.weight_sum - (1.0 / 100.0 + 1.0 / 300.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_size_task_is_a_stream_error() {
        let mut a = AnchorState::new(1, 2);
        assert!(matches!(a.fold(&unit(2, 0), 0), Err(Error::Stream(_))));
    }

    #[test]
    fn lambda_reference_values() {
        let mut a = AnchorState::new(1, 1);
        a.observe_size(100).unwrap();
        a.observe_size(500).unwrap();
        assert!((compute_lambda(300, &a, 1e-6) - 0.5).abs() < 1e-8);
        assert_eq!(compute_lambda(100, &a, 1e-6), 0.0);
        let top = compute_lambda(500, &a, 1e-6);
        assert!(top < 1.0 && top > 1.0 - 1e-8);

        let mut flat = AnchorState::new(1, 1);
        for _ in 0..3 {
            flat.observe_size(64).unwrap();
        }
        assert_eq!(compute_lambda(64, &flat, 1e-6), 0.0);
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [
            Mode::Dap,
            Mode::GeneralOnly,
            Mode::BoostingOnly,
            Mode::StabilizingOnly,
            Mode::FixedLambda(0.25),
            Mode::TaskSpecificOnly,
        ] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("fixed_lambda(1.5)".parse::<Mode>().is_err());
        assert!("everything".parse::<Mode>().is_err());
    }

    #[test]
    fn mode_coefficients() {
        let s = LambdaSemantics::AsEquations;
        assert_eq!(
            AlignmentWeights::for_mode(Mode::Dap, 0.25, s),
            AlignmentWeights {
                stabilizing: 0.25,
                boosting: 0.75
            }
        );
        assert_eq!(
            AlignmentWeights::for_mode(Mode::Dap, 0.25, LambdaSemantics::AsProse),
            AlignmentWeights {
                stabilizing: 0.75,
                boosting: 0.25
            }
        );
        assert_eq!(
            AlignmentWeights::for_mode(Mode::FixedLambda(0.5), 0.9, s).stabilizing,
            0.5
        );
        assert_eq!(AlignmentWeights::for_mode(Mode::GeneralOnly, 0.9, s), AlignmentWeights::NONE);
    }

    #[test]
    fn model_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let general = PromptVector::random(2, 3, 1.0, &mut rng);
        let head = ClassifierHead {
            weight: Tensor2::random_normal(3, 4, 1.0, &mut rng),
            bias: Tensor2::random_normal(1, 4, 1.0, &mut rng),
        };
        let state = ContinualState {
            general: general.clone(),
            head: head.clone(),
            anchors: AnchorState::new(2, 3),
            oracle_prompts: Vec::new(),
            log: Vec::new(),
        };
        let (g, h) = decode_model_state(&state.model_state_bytes()).unwrap();
        assert_eq!((g, h), (general, head));
        assert!(decode_model_state(b"nope").is_err());
    }
}
