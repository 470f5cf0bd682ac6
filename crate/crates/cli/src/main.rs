use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ticl::dap::Mode;
use ticl::streams::Ordering;
use ticl_cli::commands::{self, RunOptions};
use ticl_cli::{CliResult, ExperimentConfig};

/// Task-imbalanced continual learning experiments.
///
/// Exit codes: 0 success, 2 config error, 3 data error, 4 partial sweep.
#[derive(Parser)]
#[command(name = "ticl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config with dotted keys, e.g. `stream.rho = 0.05`.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set dap.epochs_phase1=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stream file and print its fingerprint.
    GenStream {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ordering: Option<Ordering>,
        /// Seed offset for the stream seeds (default: the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Destination file (default: <output_dir>/streams/<ordering>_seed<seed>.ticl).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Train one mode over every configured seed.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        ordering: Option<Ordering>,
        /// Use a saved stream instead of generating one per seed.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Overwrite existing results.
        #[arg(long)]
        force: bool,
    },
    /// Sweep modes x orderings x fixed-λ grid x seeds (resumable).
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Discard any existing sweep in the output directory.
        #[arg(long)]
        force: bool,
        /// Run at most this many outstanding cells, then stop.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Linear-probe the general prompt after every task.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "dap,general_only")]
        modes: Vec<Mode>,
        #[arg(long)]
        ordering: Option<Ordering>,
        #[arg(long)]
        force: bool,
    },
    /// Summarize a results directory into summary.csv and SVG charts.
    Report {
        /// Results directory (default: the configured output directory).
        #[arg(long)]
        dir: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the CSV schemas as JSON.
    Schemas,
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenStream {
            config,
            ordering,
            seed,
            file,
        } => {
            let cfg = config.load()?;
            let g = commands::cmd_gen_stream(&cfg, ordering, seed, file.as_deref())?;
            println!("wrote {}", g.path.display());
            println!("task sizes: {:?}", g.task_sizes);
            println!("fingerprint: {}", g.fingerprint);
        }
        Command::Run {
            config,
            mode,
            ordering,
            stream,
            force,
        } => {
            let cfg = config.load()?;
            let opts = RunOptions {
                mode,
                ordering,
                stream_file: stream,
                force,
            };
            let report = commands::cmd_run(&cfg, &opts)?;
            for r in &report.rows {
                println!(
                    "{} {} seed {}: A_N {:.4}  A_L {:.4}  P {:.4}  F {:.4}",
                    r.mode, r.ordering, r.seed, r.a_n, r.a_l, r.mean_p, r.mean_f
                );
            }
            println!("results in {}", report.dir.display());
        }
        Command::Ablate {
            config,
            force,
            max_cells,
        } => {
            let cfg = config.load()?;
            let report = commands::cmd_ablate(&cfg, force, max_cells)?;
            if report.remaining > 0 {
                println!(
                    "{}/{} cells done, {} remaining; rerun to resume",
                    report.completed, report.total, report.remaining
                );
            } else {
                println!("{} cells done; aggregate in {}", report.total, report.dir.join("ablate.csv").display());
            }
        }
        Command::Probe {
            config,
            modes,
            ordering,
            force,
        } => {
            let cfg = config.load()?;
            let report = commands::cmd_probe(&cfg, &modes, ordering, force)?;
            for (mode, curve) in &report.mean_curves {
                let pts: Vec<String> = curve.iter().map(|a| format!("{a:.3}")).collect();
                println!("{mode}: {}", pts.join(" "));
            }
            println!("wrote {}", report.path.display());
        }
        Command::Report { dir, config } => {
            let dir = match dir {
                Some(d) => d,
                None => config.load()?.resolved_output_dir(),
            };
            let out = commands::cmd_report(&dir)?;
            println!("wrote {}", out.summary.display());
            for c in &out.charts {
                println!("wrote {}", c.display());
            }
        }
        Command::Schemas => {
            println!("{}", serde_json::to_string_pretty(&commands::schemas()).expect("json"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
