//! Subcommand implementations. Every file is written atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use ticl::backbone::{init_backbone, FrozenBackbone};
use ticl::dap::Mode;
use ticl::eval::{probe_curve, ProbeConfig};
use ticl::streams::{balanced_train_set, load_stream, save_stream, write_atomic, Ordering};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiment::{self, fmt6, ResultRow, RESULT_COLUMNS};
use crate::svg::{line_chart, Series};

pub const ABLATE_SCHEMA: &str = "ticl-ablate/1";
pub const PROBE_SCHEMA: &str = "ticl-probe/1";
pub const SUMMARY_SCHEMA: &str = "ticl-summary/1";

fn csv_bytes<I, R>(header: &[&str], rows: I) -> CliResult<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn backbone(cfg: &ExperimentConfig) -> CliResult<FrozenBackbone> {
    Ok(init_backbone(&cfg.backbone)?)
}

// ---------------------------------------------------------------- gen-stream

pub struct GeneratedStream {
    pub path: PathBuf,
    pub fingerprint: String,
    pub task_sizes: Vec<usize>,
}

pub fn cmd_gen_stream(
    cfg: &ExperimentConfig,
    ordering: Option<Ordering>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> CliResult<GeneratedStream> {
    let ordering = ordering.unwrap_or(cfg.stream.ordering);
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let stream = experiment::generate_stream(cfg, ordering, seed)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => cfg
            .resolved_output_dir()
            .join("streams")
            .join(format!("{ordering}_seed{seed}.ticl")),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_stream(&stream, &path)?;
    Ok(GeneratedStream {
        path,
        fingerprint: stream.fingerprint().to_owned(),
        task_sizes: stream.task_sizes(),
    })
}

// ----------------------------------------------------------------------- run

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub mode: Option<Mode>,
    pub ordering: Option<Ordering>,
    pub stream_file: Option<PathBuf>,
    pub force: bool,
}

pub struct RunReport {
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
}

/// Runs every configured seed and writes, per seed, an accuracy-matrix CSV,
/// a manifest and the final model state, plus `results.csv` and the
/// effective `config.toml`.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<RunReport> {
    let dir = cfg.resolved_output_dir();
    let results_path = dir.join("results.csv");
    if results_path.exists() && !opts.force {
        return Err(CliError::Config(format!(
            "{} already holds results; pass --force to overwrite",
            dir.display()
        )));
    }
    let mode = opts.mode.unwrap_or(cfg.dap.mode);
    let backbone = backbone(cfg)?;
    let loaded = match &opts.stream_file {
        Some(p) => {
            let s = load_stream(p).map_err(|e| CliError::from(e).context(p.display()))?;
            if let Some(o) = opts.ordering.filter(|&o| o != s.spec.ordering) {
                return Err(CliError::Config(format!(
                    "--ordering {o} conflicts with the stream file's ordering {}",
                    s.spec.ordering
                )));
            }
            Some(s)
        }
        None => None,
    };
    let ordering = opts.ordering.unwrap_or(cfg.stream.ordering);

    let runs: Vec<experiment::CellRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| match &loaded {
            Some(s) => experiment::run_on_stream(cfg, &backbone, s.clone(), mode, seed),
            None => experiment::run_cell(cfg, &backbone, mode, ordering, seed),
        })
        .collect::<CliResult<_>>()?;

    create_dir(&dir)?;
    for run in &runs {
        let s = run.row.seed;
        write_atomic(&dir.join(format!("matrix_seed{s}.csv")), run.outcome.matrix.to_csv().as_bytes())?;
        write_json(&dir.join(format!("manifest_seed{s}.json")), &experiment::manifest(cfg, &backbone, run))?;
        write_atomic(
            &dir.join(format!("state_seed{s}.tdap")),
            &run.outcome.state.model_state_bytes(),
        )?;
    }
    let rows: Vec<ResultRow> = runs.into_iter().map(|r| r.row).collect();
    write_atomic(&results_path, &csv_bytes(&RESULT_COLUMNS, rows.iter().map(ResultRow::record))?)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(RunReport { dir, rows })
}

// -------------------------------------------------------------------- ablate

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub ordering: Ordering,
    pub mode: Mode,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        let mode = self.mode.to_string().replace('(', "-").replace(')', "");
        format!("{}__{mode}__seed{}", self.ordering, self.seed)
    }
}

/// Every (mode, ordering, seed) of the sweep, in output order. The fixed-λ
/// grid follows the listed modes.
pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let modes: Vec<Mode> = cfg
        .ablate
        .modes
        .iter()
        .copied()
        .chain(cfg.ablate.lambda_grid.iter().map(|&l| Mode::FixedLambda(l)))
        .collect();
    let mut cells = Vec::new();
    for &ordering in &cfg.ablate.orderings {
        for &mode in &modes {
            for &seed in &cfg.seeds {
                cells.push(Cell { ordering, mode, seed });
            }
        }
    }
    cells
}

#[derive(Serialize, Deserialize)]
struct CellFile {
    config_fingerprint: String,
    row: ResultRow,
}

#[derive(Serialize, Deserialize)]
struct AblateManifest {
    schema: String,
    config_fingerprint: String,
    cells: Vec<String>,
}

pub struct AblateReport {
    pub dir: PathBuf,
    pub total: usize,
    pub completed: usize,
    /// Cells still to run (non-zero only when `max_cells` stopped early).
    pub remaining: usize,
}

fn read_cell(path: &Path, fingerprint: &str) -> Option<ResultRow> {
    let text = fs::read_to_string(path).ok()?;
    let cell: CellFile = serde_json::from_str(&text).ok()?;
    (cell.config_fingerprint == fingerprint).then_some(cell.row)
}

pub const ABLATE_COLUMNS: [&str; 14] = [
    "ordering",
    "mode",
    "lambda",
    "n_seeds",
    "a_n_mean",
    "a_n_stderr",
    "a_l_mean",
    "a_l_stderr",
    "a_n_final_reading_mean",
    "a_n_final_reading_stderr",
    "mean_p_mean",
    "mean_p_stderr",
    "mean_f_mean",
    "mean_f_stderr",
];

/// Mean and standard error of the mean (sample standard deviation / √n).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn lambda_label(mode: Mode) -> String {
    match mode {
        Mode::FixedLambda(l) => fmt6(l),
        Mode::Dap => "dynamic".into(),
        _ => String::new(),
    }
}

/// Full-factorial sweep. Finished cells are kept on disk and skipped on the
/// next invocation; `max_cells` bounds how many new cells this call runs.
pub fn cmd_ablate(cfg: &ExperimentConfig, force: bool, max_cells: Option<usize>) -> CliResult<AblateReport> {
    let dir = cfg.resolved_output_dir().join("ablate");
    let cells_dir = dir.join("cells");
    let manifest_path = dir.join("manifest.json");
    let fingerprint = cfg.fingerprint();
    let cells = ablation_cells(cfg);

    if manifest_path.exists() {
        let old: Option<AblateManifest> =
            fs::read_to_string(&manifest_path).ok().and_then(|t| serde_json::from_str(&t).ok());
        let same = old.is_some_and(|m| m.config_fingerprint == fingerprint);
        if !same && !force {
            return Err(CliError::Config(format!(
                "{} holds a sweep for a different config; pass --force to discard it",
                dir.display()
            )));
        }
    }
    if force && cells_dir.exists() {
        fs::remove_dir_all(&cells_dir)?;
        let _ = fs::remove_file(dir.join("ablate.csv"));
    }
    create_dir(&cells_dir)?;
    write_json(
        &manifest_path,
        &AblateManifest {
            schema: ABLATE_SCHEMA.into(),
            config_fingerprint: fingerprint.clone(),
            cells: cells.iter().map(Cell::id).collect(),
        },
    )?;

    let cell_path = |c: &Cell| cells_dir.join(format!("{}.json", c.id()));
    let pending: Vec<Cell> = cells
        .iter()
        .filter(|c| read_cell(&cell_path(c), &fingerprint).is_none())
        .copied()
        .collect();
    let batch: Vec<Cell> = pending.iter().take(max_cells.unwrap_or(usize::MAX)).copied().collect();

    let backbone = backbone(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.ablate.workers)
        .build()
        .map_err(|e| CliError::Config(format!("ablate.workers: {e}")))?;
    let failures: Vec<String> = pool.install(|| {
        batch
            .par_iter()
            .filter_map(|cell| {
                let result = experiment::run_cell(cfg, &backbone, cell.mode, cell.ordering, cell.seed).and_then(|run| {
                    let file = CellFile {
                        config_fingerprint: fingerprint.clone(),
                        row: run.row,
                    };
                    write_json(&cell_path(cell), &file)
                });
                result.err().map(|e| format!("{}: {e}", cell.id()))
            })
            .collect()
    });

    let done: Vec<Option<ResultRow>> = cells.iter().map(|c| read_cell(&cell_path(c), &fingerprint)).collect();
    let completed = done.iter().filter(|r| r.is_some()).count();
    if !failures.is_empty() {
        return Err(CliError::PartialSweep {
            failed: failures.len(),
            total: cells.len(),
            details: failures.join("\n"),
        });
    }
    let report = AblateReport {
        dir: dir.clone(),
        total: cells.len(),
        completed,
        remaining: cells.len() - completed,
    };
    if report.remaining > 0 {
        return Ok(report);
    }

    let rows: Vec<ResultRow> = done.into_iter().flatten().collect();
    let mut groups: Vec<((Ordering, Mode), Vec<&ResultRow>)> = Vec::new();
    for row in &rows {
        match groups.last_mut() {
            Some((key, members)) if *key == (row.ordering, row.mode) => members.push(row),
            _ => groups.push(((row.ordering, row.mode), vec![row])),
        }
    }
    let records = groups.iter().map(|((ordering, mode), members)| {
        let stat = |f: fn(&ResultRow) -> f64| mean_stderr(&members.iter().map(|r| f(r)).collect::<Vec<_>>());
        let mut rec = vec![
            ordering.to_string(),
            mode.to_string(),
            lambda_label(*mode),
            members.len().to_string(),
        ];
        for f in [
            (|r: &ResultRow| r.a_n) as fn(&ResultRow) -> f64,
            |r| r.a_l,
            |r| r.a_n_final_reading,
            |r| r.mean_p,
            |r| r.mean_f,
        ] {
            let (m, s) = stat(f);
            rec.push(fmt6(m));
            rec.push(fmt6(s));
        }
        rec
    });
    write_atomic(&dir.join("ablate.csv"), &csv_bytes(&ABLATE_COLUMNS, records)?)?;
    Ok(report)
}

// --------------------------------------------------------------------- probe

pub const PROBE_COLUMNS: [&str; 5] = ["mode", "ordering", "seed", "after_task", "accuracy"];

pub struct ProbeReport {
    pub path: PathBuf,
    /// Seed-mean probe accuracy after each task, per mode.
    pub mean_curves: Vec<(Mode, Vec<f64>)>,
}

/// Linear-probe accuracy of `p_g` after every task, for each mode and seed.
/// The probe trains on the balanced counterpart of each seed's stream.
pub fn cmd_probe(cfg: &ExperimentConfig, modes: &[Mode], ordering: Option<Ordering>, force: bool) -> CliResult<ProbeReport> {
    let dir = cfg.resolved_output_dir();
    let path = dir.join("probe.csv");
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    let ordering = ordering.unwrap_or(cfg.stream.ordering);
    let backbone = backbone(cfg)?;
    let jobs: Vec<(Mode, u64)> = modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let curves: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(mode, seed)| probe_run(cfg, &backbone, mode, ordering, seed))
        .collect::<CliResult<_>>()?;

    let mut records = Vec::new();
    for (&(mode, seed), curve) in jobs.iter().zip(&curves) {
        for (t, acc) in curve.iter().enumerate() {
            records.push(vec![mode.to_string(), ordering.to_string(), seed.to_string(), t.to_string(), fmt6(*acc)]);
        }
    }
    create_dir(&dir)?;
    write_atomic(&path, &csv_bytes(&PROBE_COLUMNS, records)?)?;

    let mean_curves = modes
        .iter()
        .map(|&m| {
            let mine: Vec<&Vec<f64>> = jobs.iter().zip(&curves).filter(|(j, _)| j.0 == m).map(|(_, c)| c).collect();
            let len = mine[0].len();
            let mean = (0..len)
                .map(|t| mine.iter().map(|c| c[t]).sum::<f64>() / mine.len() as f64)
                .collect();
            (m, mean)
        })
        .collect();
    Ok(ProbeReport { path, mean_curves })
}

/// Probe curve of one run.
pub fn probe_run(
    cfg: &ExperimentConfig,
    backbone: &FrozenBackbone,
    mode: Mode,
    ordering: Ordering,
    seed: u64,
) -> CliResult<Vec<f64>> {
    let run = experiment::run_cell(cfg, backbone, mode, ordering, seed)?;
    let train = balanced_train_set(&cfg.stream_for(seed, ordering), &cfg.data)?;
    let probe_cfg = ProbeConfig {
        seed: cfg.probe.seed.wrapping_add(seed),
        ..cfg.probe.clone()
    };
    Ok(probe_curve(backbone, &run.outcome.general_snapshots, &train, &run.stream.test, &probe_cfg)?)
}

// -------------------------------------------------------------------- report

#[derive(Debug, Deserialize)]
struct AblateRow {
    ordering: String,
    mode: String,
    lambda: String,
    a_n_mean: f64,
    a_n_stderr: f64,
    a_l_mean: f64,
    mean_p_mean: f64,
    mean_f_mean: f64,
}

#[derive(Debug, Deserialize)]
struct ProbeRow {
    mode: String,
    ordering: String,
    after_task: usize,
    accuracy: f64,
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "ordering",
    "mode",
    "a_n",
    "a_n_stderr",
    "a_l",
    "mean_p",
    "mean_f",
    "probe_first",
    "probe_last",
];

pub struct ReportOutput {
    pub summary: PathBuf,
    pub charts: Vec<PathBuf>,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Summary table plus two charts: A_N against fixed λ (with the other modes
/// as reference lines) and probe accuracy after each task.
pub fn cmd_report(dir: &Path) -> CliResult<ReportOutput> {
    let ablate_csv = dir.join("ablate").join("ablate.csv");
    let probe_csv = dir.join("probe.csv");
    let mut missing = Vec::new();
    if !ablate_csv.exists() {
        missing.push(format!("{} (run `ticl ablate`)", ablate_csv.display()));
        let manifest = dir.join("ablate").join("manifest.json");
        if let Some(m) = fs::read_to_string(&manifest)
            .ok()
            .and_then(|t| serde_json::from_str::<AblateManifest>(&t).ok())
        {
            let cells_dir = dir.join("ablate").join("cells");
            let absent: Vec<String> = m
                .cells
                .iter()
                .filter(|id| read_cell(&cells_dir.join(format!("{id}.json")), &m.config_fingerprint).is_none())
                .cloned()
                .collect();
            missing.push(format!("  {} of {} sweep cells missing:", absent.len(), m.cells.len()));
            missing.extend(absent.into_iter().map(|id| format!("    {id}")));
        }
    }
    if !probe_csv.exists() {
        missing.push(format!("{} (run `ticl probe`)", probe_csv.display()));
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!("missing results:\n{}", missing.join("\n"))));
    }

    let ablate: Vec<AblateRow> = read_csv(&ablate_csv)?;
    let probe: Vec<ProbeRow> = read_csv(&probe_csv)?;
    if ablate.is_empty() || probe.is_empty() {
        return Err(CliError::Data("result files are empty".into()));
    }

    // seed-mean probe curve per (ordering, mode), in first-seen order
    let mut curve_keys: Vec<(String, String)> = Vec::new();
    let mut sums: BTreeMap<(String, String), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in &probe {
        let key = (r.ordering.clone(), r.mode.clone());
        if !curve_keys.contains(&key) {
            curve_keys.push(key.clone());
        }
        let e = sums.entry(key).or_default().entry(r.after_task).or_insert((0.0, 0));
        e.0 += r.accuracy;
        e.1 += 1;
    }
    let curves: BTreeMap<(String, String), Vec<f64>> = sums
        .into_iter()
        .map(|(k, v)| (k, v.values().map(|(s, n)| s / *n as f64).collect()))
        .collect();

    let records = ablate.iter().map(|r| {
        let curve = curves.get(&(r.ordering.clone(), r.mode.clone()));
        let (first, last) = match curve {
            Some(c) => (fmt6(c[0]), fmt6(*c.last().expect("non-empty"))),
            None => (String::new(), String::new()),
        };
        vec![
            r.ordering.clone(),
            r.mode.clone(),
            fmt6(r.a_n_mean),
            fmt6(r.a_n_stderr),
            fmt6(r.a_l_mean),
            fmt6(r.mean_p_mean),
            fmt6(r.mean_f_mean),
            first,
            last,
        ]
    });
    let summary = dir.join("summary.csv");
    write_atomic(&summary, &csv_bytes(&SUMMARY_COLUMNS, records)?)?;

    let chart_ordering = if ablate.iter().any(|r| r.ordering == "shuffled") {
        "shuffled".to_string()
    } else {
        ablate[0].ordering.clone()
    };
    let mine: Vec<&AblateRow> = ablate.iter().filter(|r| r.ordering == chart_ordering).collect();
    let mut fixed: Vec<(f64, f64)> = mine
        .iter()
        .filter(|r| r.mode.starts_with("fixed_lambda"))
        .filter_map(|r| r.lambda.parse::<f64>().ok().map(|l| (l, r.a_n_mean)))
        .collect();
    fixed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut charts = Vec::new();
    if !fixed.is_empty() {
        let xs: Vec<f64> = fixed.iter().map(|f| f.0).collect();
        let mut series = vec![Series {
            label: "fixed λ".into(),
            values: fixed.iter().map(|f| f.1).collect(),
            dashed: false,
        }];
        for r in mine.iter().filter(|r| !r.mode.starts_with("fixed_lambda")) {
            series.push(Series {
                label: r.mode.clone(),
                values: vec![r.a_n_mean; xs.len()],
                dashed: true,
            });
        }
        let svg = line_chart(&format!("A_N vs λ ({chart_ordering})"), "λ", "A_N", &xs, &series);
        let path = dir.join("an_vs_lambda.svg");
        write_atomic(&path, svg.as_bytes())?;
        charts.push(path);
    }

    let probe_series: Vec<Series> = curve_keys
        .iter()
        .map(|k| Series {
            label: if curve_keys.iter().all(|o| o.0 == k.0) {
                k.1.clone()
            } else {
                format!("{} ({})", k.1, k.0)
            },
            values: curves[k].clone(),
            dashed: false,
        })
        .collect();
    let t = probe_series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let xs: Vec<f64> = (1..=t).map(|x| x as f64).collect();
    let svg = line_chart("Linear-probe accuracy of p_g", "after task", "probe accuracy", &xs, &probe_series);
    let path = dir.join("probe_curve.svg");
    write_atomic(&path, svg.as_bytes())?;
    charts.push(path);

    Ok(ReportOutput { summary, charts })
}

/// Machine-readable description of the CSV layouts.
pub fn schemas() -> serde_json::Value {
    json!({
        "results.csv": { "schema": experiment::RESULTS_SCHEMA, "columns": RESULT_COLUMNS },
        "matrix_seed*.csv": { "schema": experiment::MATRIX_SCHEMA, "columns": ["after_task", "eval_task", "accuracy"] },
        "ablate.csv": { "schema": ABLATE_SCHEMA, "columns": ABLATE_COLUMNS },
        "probe.csv": { "schema": PROBE_SCHEMA, "columns": PROBE_COLUMNS },
        "summary.csv": { "schema": SUMMARY_SCHEMA, "columns": SUMMARY_COLUMNS },
    })
}
