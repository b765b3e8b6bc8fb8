use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lcvi::config::ExperimentConfig;
use lcvi::ingest::{ingest_count_matrix, write_matrix_cache};
use lcvi::pipeline::{run_pipeline, sweep, sweep_file, SweepAxis};

/// Loss-calibrated variational inference experiments.
#[derive(Parser)]
#[command(name = "lcvi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit standard VI and LCVI for every seed of a config and report the risk reduction.
    Fit {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Repeat `fit` over values of one axis.
    Sweep {
        config: PathBuf,
        /// quantile, sample_budget or regime
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. `0.5,0.9,0.999*10`, `10x10,30x10` or `joint_lcvi,em_closed_form`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Turn a `user,item,count` CSV into a log1p matrix cache with a train/test mask.
    Ingest {
        csv: PathBuf,
        /// Keep only the most frequently counted items.
        #[arg(long)]
        top_items: Option<usize>,
        /// Seed of the train/test split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(clap::Args)]
struct Overrides {
    /// Write outputs here instead of the config's `run.output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Run only these seeds (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
}

fn load(path: &PathBuf, o: Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("stage `config` failed for {}", path.display()))?;
    if let Some(dir) = o.output_dir {
        cfg.run.output_dir = dir;
    }
    if let Some(seeds) = o.seed_override {
        cfg.run.seeds = seeds;
        cfg.validate().context("stage `config` failed")?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { config, overrides } => {
            let cfg = load(&config, overrides)?;
            let result = run_pipeline(&cfg)?;
            for o in &result.outcomes {
                println!(
                    "seed {:>3}  M {:>12}  ER_VI {:.6e}  ER_LCVI {:.6e}  I {:+.4}%",
                    o.seed,
                    o.m.map_or("-".to_string(), |m| format!("{m:.4e}")),
                    o.er_vi,
                    o.er_lcvi,
                    100.0 * o.improvement
                );
            }
            let r = &result.report;
            println!(
                "mean I {:+.4}% (sd {:.4}%) over {} seeds; outputs in {}",
                100.0 * r.report.improvement,
                100.0 * r.improvement_std,
                r.report.seed_count,
                cfg.run.output_dir.display()
            );
        }
        Command::Sweep {
            config,
            axis,
            values,
            overrides,
        } => {
            let cfg = load(&config, overrides)?;
            for row in sweep(&cfg, axis, &values)? {
                println!(
                    "{:<16} I {:+.4}% (sd {:.4}%)  {:.1} s/seed",
                    row.value,
                    100.0 * row.mean_improvement,
                    100.0 * row.std_improvement,
                    row.mean_wall_seconds
                );
            }
            println!("table written to {}", sweep_file(&cfg).display());
        }
        Command::Ingest {
            csv,
            top_items,
            seed,
            output,
        } => {
            let matrix = ingest_count_matrix(&csv, top_items, seed).context("stage `ingest` failed")?;
            let note = format!("source {} top_items {top_items:?} seed {seed}", csv.display());
            write_matrix_cache(&output, &matrix, &note).context("stage `output` failed")?;
            println!(
                "{} users x {} items written to {}",
                matrix.users.len(),
                matrix.items.len(),
                output.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
