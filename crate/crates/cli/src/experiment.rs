//! One continual run (a mode, an ordering and a seed) and its result row.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use ticl::backbone::FrozenBackbone;
use ticl::dap::{run_continual, run_seed, Mode, RunOutcome};
use ticl::eval::MetricsReport;
use ticl::streams::{generate_synthetic, Ordering, TaskStream};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const RESULTS_SCHEMA: &str = "ticl-results/1";
pub const MATRIX_SCHEMA: &str = "ticl-matrix/1";
pub const MANIFEST_SCHEMA: &str = "ticl-run-manifest/1";

pub const RESULT_COLUMNS: [&str; 11] = [
    "mode",
    "ordering",
    "rho",
    "seed",
    "a_n",
    "a_l",
    "a_n_final_reading",
    "mean_p",
    "mean_f",
    "lambda_trace",
    "wall_time_s",
];

/// Summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: Mode,
    pub ordering: Ordering,
    pub rho: f64,
    pub seed: u64,
    pub a_n: f64,
    pub a_l: f64,
    pub a_n_final_reading: f64,
    pub mean_p: f64,
    pub mean_f: f64,
    pub lambda_trace: Vec<f64>,
    pub wall_time_s: f64,
}

impl ResultRow {
    pub fn record(&self) -> Vec<String> {
        let trace = self.lambda_trace.iter().map(|l| fmt6(*l)).collect::<Vec<_>>().join(";");
        vec![
            self.mode.to_string(),
            self.ordering.to_string(),
            fmt6(self.rho),
            self.seed.to_string(),
            fmt6(self.a_n),
            fmt6(self.a_l),
            fmt6(self.a_n_final_reading),
            fmt6(self.mean_p),
            fmt6(self.mean_f),
            trace,
            fmt6(self.wall_time_s),
        ]
    }
}

pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Everything a run produced.
pub struct CellRun {
    pub row: ResultRow,
    pub outcome: RunOutcome,
    pub metrics: MetricsReport,
    pub stream: TaskStream,
}

pub fn generate_stream(cfg: &ExperimentConfig, ordering: Ordering, seed: u64) -> CliResult<TaskStream> {
    Ok(generate_synthetic(&cfg.stream_for(seed, ordering), &cfg.data)?)
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    backbone: &FrozenBackbone,
    mode: Mode,
    ordering: Ordering,
    seed: u64,
) -> CliResult<CellRun> {
    let stream = generate_stream(cfg, ordering, seed).map_err(|e| e.context(format!("seed {seed}")))?;
    run_on_stream(cfg, backbone, stream, mode, seed)
}

pub fn run_on_stream(
    cfg: &ExperimentConfig,
    backbone: &FrozenBackbone,
    stream: TaskStream,
    mode: Mode,
    seed: u64,
) -> CliResult<CellRun> {
    let ctx = format!("mode {mode}, ordering {}, seed {seed}", stream.spec.ordering);
    let start = Instant::now();
    let outcome = run_continual(&stream, backbone, &cfg.dap_for(seed, mode)).map_err(|e| CliError::from(e).context(&ctx))?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let metrics = MetricsReport::from_matrix(&outcome.matrix).map_err(|e| CliError::from(e).context(&ctx))?;
    let row = ResultRow {
        mode,
        ordering: stream.spec.ordering,
        rho: stream.spec.rho,
        seed,
        a_n: metrics.a_n,
        a_l: metrics.a_l,
        a_n_final_reading: metrics.a_n_final_reading,
        mean_p: metrics.mean_plasticity,
        mean_f: metrics.mean_forgetting,
        lambda_trace: outcome.state.log.iter().map(|l| l.lambda).collect(),
        wall_time_s,
    };
    Ok(CellRun {
        row,
        outcome,
        metrics,
        stream,
    })
}

/// Provenance record written next to each run's matrix.
pub fn manifest(cfg: &ExperimentConfig, backbone: &FrozenBackbone, run: &CellRun) -> serde_json::Value {
    let log = &run.outcome.state.log;
    let seed = cfg.dap_for(run.row.seed, run.row.mode).seed;
    json!({
        "schema": MANIFEST_SCHEMA,
        "csv_schemas": { "results": RESULTS_SCHEMA, "matrix": MATRIX_SCHEMA },
        "mode": run.row.mode.to_string(),
        "ordering": run.row.ordering.to_string(),
        "seed": run.row.seed,
        "oracle_prompt_selection": run.row.mode.uses_oracle_selection(),
        "config_fingerprint": cfg.fingerprint(),
        "backbone_fingerprint": backbone.fingerprint(),
        "stream_fingerprint": run.stream.fingerprint(),
        "run_rng_seed": run_seed(seed, run.stream.fingerprint()),
        "task_ids": log.iter().map(|l| l.task_id).collect::<Vec<_>>(),
        "task_sizes": log.iter().map(|l| l.n_t).collect::<Vec<_>>(),
        "lambda_trace": run.row.lambda_trace,
        "alignment_weights": log.iter().map(|l| [l.weights.stabilizing, l.weights.boosting]).collect::<Vec<_>>(),
        "final_phase1_loss": log.iter().map(|l| l.phase1_losses.last().copied()).collect::<Vec<_>>(),
        "final_phase2_loss": log.iter().map(|l| l.phase2_losses.last().copied()).collect::<Vec<_>>(),
        "persistent_state_bytes": run.outcome.persistent_sizes,
        "metrics": run.metrics,
    })
}
