//! Batch experiment runner: replicated adaptive/nonadaptive runs with
//! aggregated estimator reports, plot-ready convergence tables, and a
//! built-in verification battery.

mod config;
mod experiment;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "asmc", version, about = "Adaptive SMC variance-estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides the config's seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        threads: Option<usize>,
        /// Config overrides as dotted key=value pairs, e.g.
        /// `--override N=[100,400]` or `--override gaussian.dimension=5`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Emit a long-format plot table from an aggregate file.
    PlotData {
        aggregate: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated series to include (adaptive, nonadaptive,
        /// reference); defaults to every series present.
        #[arg(long)]
        series: Option<String>,
    },
    /// Run the oracle and identity battery and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 20240913)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            // Machine-readable error record on stderr.
            eprintln!(
                "{}",
                serde_json::json!({ "error": format!("{err:#}") })
            );
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
            overrides,
        } => {
            let mut all_overrides = overrides;
            if let Some(seed) = seed {
                all_overrides.push(format!("seed={seed}"));
            }
            let cfg = ExperimentConfig::load(&config, &all_overrides)?;
            let config_dir = config
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let out_dir = out
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .context("building the worker pool")?;
            let aggregate =
                pool.install(|| experiment::run_experiment(&cfg, &config_dir, &out_dir))?;
            println!("wrote {}", aggregate.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::PlotData {
            aggregate,
            out,
            series,
        } => {
            let requested: Option<Vec<String>> =
                series.map(|s| s.split(',').map(|p| p.trim().to_string()).collect());
            experiment::emit_plot_data(&aggregate, &out, requested.as_deref())?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { seed } => {
            let results = asmc::verify::run_all(seed);
            let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
            let mut failed = 0;
            for r in &results {
                println!(
                    "{:<width$}  {}  {}",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.detail,
                );
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                println!("{failed} of {} checks failed", results.len());
                Ok(ExitCode::FAILURE)
            } else {
                println!("all {} checks passed", results.len());
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}
