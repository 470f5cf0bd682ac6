//! Accuracy bookkeeping and the stability/plasticity metrics derived from it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ClassifierHead, FrozenBackbone, PromptVector};
use crate::error::{Error, Result};
use crate::numerics::graph::linear_head_loss_and_gradients;
use crate::numerics::{AdamConfig, AdamState, Tensor2};
use crate::streams::Split;

/// `acc[i][j]`: accuracy on task `j`'s test data after training task `i`,
/// defined for `j ≤ i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            rows: (0..num_tasks).map(|i| vec![None; i + 1]).collect(),
        }
    }

    /// Builds a complete matrix from lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Metrics(format!("row {i} has {} entries, expected {}", row.len(), i + 1)));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        if j > i || i >= self.rows.len() {
            return Err(Error::Metrics(format!("entry ({i}, {j}) is outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Metrics(format!("accuracy {acc} outside [0, 1]")));
        }
        self.rows[i][j] = Some(acc);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }

    fn complete_rows(&self) -> Result<Vec<Vec<f64>>> {
        if self.rows.is_empty() {
            return Err(Error::Metrics("empty accuracy matrix".into()));
        }
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| v.ok_or_else(|| Error::Metrics(format!("accuracy matrix entry ({i}, {j}) missing"))))
                    .collect()
            })
            .collect()
    }

    /// `row,col,accuracy` lines with `%.6f` formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task,eval_task,accuracy\n");
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                match v {
                    Some(a) => out.push_str(&format!("{i},{j},{a:.6}\n")),
                    None => out.push_str(&format!("{i},{j},\n")),
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlasticityForgetting {
    /// `P_t = acc[t][t]`
    pub plasticity: Vec<f64>,
    /// `F_t = acc[t][t] − acc[T][t]`; may be negative.
    pub forgetting: Vec<f64>,
    pub mean_plasticity: f64,
    /// Mean over all but the last task, whose forgetting is identically zero.
    pub mean_forgetting: f64,
}

pub fn plasticity_forgetting(m: &AccuracyMatrix) -> Result<PlasticityForgetting> {
    let rows = m.complete_rows()?;
    let last = rows.len() - 1;
    let plasticity: Vec<f64> = (0..=last).map(|t| rows[t][t]).collect();
    let forgetting: Vec<f64> = (0..=last).map(|t| rows[t][t] - rows[last][t]).collect();
    let mean_forgetting = if last == 0 {
        0.0
    } else {
        forgetting[..last].iter().sum::<f64>() / last as f64
    };
    Ok(PlasticityForgetting {
        mean_plasticity: mean(&plasticity),
        plasticity,
        forgetting,
        mean_forgetting,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryAccuracies {
    /// `A_t`: mean accuracy over tasks `0..=t` after training task `t`.
    pub per_step: Vec<f64>,
    /// Mean of `A_t` over the stream.
    pub average: f64,
    /// `A_T`, accuracy over everything after the final task.
    pub last: f64,
}

pub fn summary_accuracies(m: &AccuracyMatrix) -> Result<SummaryAccuracies> {
    let rows = m.complete_rows()?;
    let per_step: Vec<f64> = rows.iter().map(|r| mean(r)).collect();
    Ok(SummaryAccuracies {
        average: mean(&per_step),
        last: *per_step.last().expect("non-empty"),
        per_step,
    })
}

/// Everything reported for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub plasticity: Vec<f64>,
    pub forgetting: Vec<f64>,
    pub mean_plasticity: f64,
    pub mean_forgetting: f64,
    pub a_n: f64,
    pub a_l: f64,
    /// The "final average accuracy" reading of `A_N`: mean of the last row.
    pub a_n_final_reading: f64,
    pub step_accuracies: Vec<f64>,
    pub probe_curve: Vec<f64>,
}

impl MetricsReport {
    pub fn from_matrix(m: &AccuracyMatrix) -> Result<Self> {
        let pf = plasticity_forgetting(m)?;
        let sa = summary_accuracies(m)?;
        Ok(Self {
            plasticity: pf.plasticity,
            forgetting: pf.forgetting,
            mean_plasticity: pf.mean_plasticity,
            mean_forgetting: pf.mean_forgetting,
            a_n: sa.average,
            a_l: sa.last,
            a_n_final_reading: sa.last,
            step_accuracies: sa.per_step,
            probe_curve: Vec::new(),
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy over all classes (no masking) with the given prompt.
pub fn evaluate(backbone: &FrozenBackbone, prompt: &PromptVector, head: &ClassifierHead, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Metrics("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for (x, y) in split.iter() {
        let tokens = backbone.tokenize(x)?;
        let (_, logits) = backbone.forward_with_prompt(prompt, &tokens, head)?;
        if argmax(logits.data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Trains a fresh linear head on frozen `backbone + prompt` representations
/// and returns its test accuracy.
///
/// The training data is resampled to the smallest per-class count so every
/// class contributes equally. The prompt is only read.
pub fn linear_probe(
    backbone: &FrozenBackbone,
    prompt: &PromptVector,
    train: &Split,
    test: &Split,
    config: &ProbeConfig,
) -> Result<f64> {
    let num_classes = backbone.config().num_classes_total;
    let counts = train.class_counts(num_classes);
    let min_count = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
    if min_count == 0 || test.is_empty() {
        return Err(Error::Metrics("linear probe needs non-empty train and test data".into()));
    }
    let balanced = train.take_per_class(min_count, num_classes);

    let features = |split: &Split| -> Result<(Tensor2, Vec<usize>)> {
        let d = backbone.config().embed_dim;
        let mut f = Tensor2::zeros(split.len(), d);
        for (i, (x, _)) in split.iter().enumerate() {
            let r = backbone.represent(Some(prompt), &backbone.tokenize(x)?)?;
            f.row_mut(i).copy_from_slice(r.data());
        }
        Ok((f, split.labels().to_vec()))
    };
    let (train_f, train_y) = features(&balanced)?;
    let (test_f, test_y) = features(test)?;

    let mut head = ClassifierHead::for_config(backbone.config());
    let mut opt_w = AdamState::for_param(&head.weight, config.adam);
    let mut opt_b = AdamState::for_param(&head.bias, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let batch = config.batch_size.max(1);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut xb = Tensor2::zeros(chunk.len(), train_f.cols());
            let mut yb = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).copy_from_slice(train_f.row(i));
                yb.push(train_y[i]);
            }
            let (_, gw, gb) = linear_head_loss_and_gradients(&xb, &yb, &head.weight, &head.bias)?;
            opt_w.step(&mut head.weight, &gw)?;
            opt_b.step(&mut head.bias, &gb)?;
        }
    }

    let logits = crate::numerics::linear_forward(&test_f, &head.weight, &head.bias)?;
    let correct = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == test_y[r]).count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// Probe accuracy for each `p_g` snapshot, one point per task.
pub fn probe_curve(
    backbone: &FrozenBackbone,
    snapshots: &[PromptVector],
    train: &Split,
    test: &Split,
    config: &ProbeConfig,
) -> Result<Vec<f64>> {
    snapshots
        .iter()
        .map(|p| linear_probe(backbone, p, train, test, config))
        .collect()
}
