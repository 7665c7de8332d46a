//! Experiment runner CLI: dataset generation, protocol execution across
//! methods and seeds, rank-based comparison, and graph inspection.

use aesl_core::config::{Method, RunConfig};
use aesl_core::data::{generate, save_dataset, GeneratorConfig};
use aesl_core::error::AeslError;
use aesl_core::experiment::{compare, inspect_graph, run_experiment};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "aesl", about = "Multi-label class-incremental emotion decoding", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to a directory.
    Generate {
        /// Generator config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for manifest, CSVs, oracle graph, prototypes.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute every (method, seed) pair of an experiment config.
    Run {
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the seed list, e.g. `--seed 0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Override the method list, e.g. `--method aesl,finetune`.
        #[arg(long, value_delimiter = ',')]
        method: Option<Vec<Method>>,
        /// Parallel worker slots for (method, seed) pairs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Rank methods across several result directories (Friedman + Nemenyi).
    Compare {
        /// Result directories produced by `run` (at least two).
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Significance level (0.05 or 0.10).
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Dump a relation-graph export and optionally its correlation with an
    /// oracle graph.
    InspectGraph {
        /// Graph JSON (an erg_*.json or oracle_graph.json).
        #[arg(long)]
        graph: PathBuf,
        /// Oracle graph JSON to correlate against.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
}

fn exit_code_for(err: &AeslError) -> u8 {
    match err {
        AeslError::Config(_) | AeslError::Json(_) | AeslError::MissingFile(_) => EXIT_INVALID_CONFIG,
        AeslError::RunFailed { source, .. } => match source.as_ref() {
            AeslError::TrainingDiverged { .. } => EXIT_DIVERGED,
            _ => 1,
        },
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), AeslError> {
    match cli.command {
        Command::Generate { config, out } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|_| AeslError::MissingFile(config.display().to_string()))?;
            let generator: GeneratorConfig = serde_json::from_str(&text)
                .map_err(|e| AeslError::Config(format!("{}: {e}", config.display())))?;
            let dataset = generate(&generator)?;
            let manifest = save_dataset(&dataset, &out)?;
            println!("wrote {}", manifest.display());
            println!(
                "train {} x {} features, {} labels, {} affective dims",
                dataset.train.len(),
                generator.feature_dim,
                generator.num_labels,
                generator.affective_dim
            );
            Ok(())
        }
        Command::Run {
            config,
            out,
            seed,
            method,
            jobs,
        } => {
            let mut run_config = RunConfig::from_path(&config)?;
            if let Some(out) = out {
                run_config.out_dir = out;
            }
            if let Some(seeds) = seed {
                run_config.seeds = seeds;
            }
            if let Some(methods) = method {
                run_config.methods = methods;
            }
            if let Some(jobs) = jobs {
                run_config.jobs = jobs;
            }
            let outputs = run_experiment(&run_config)?;
            println!(
                "completed {} runs (config {})",
                outputs.results.len(),
                outputs.config_hash
            );
            for result in &outputs.results {
                let last = result.report.last().expect("at least one task");
                println!(
                    "  {:<12} seed {:<3} avg-mAP {:.4}  last mAP {:.4} maF1 {:.4} miF1 {:.4}",
                    result.method,
                    result.seed,
                    result.report.avg_acc(),
                    last.map,
                    last.macro_f1,
                    last.micro_f1
                );
            }
            println!("results in {}", outputs.out_dir.display());
            Ok(())
        }
        Command::Compare { results, alpha } => {
            let report = compare(&results, alpha)?;
            println!("methods and mean ranks (lower is better):");
            for (name, rank) in report.methods.iter().zip(&report.mean_ranks) {
                println!("  {name:<12} {rank:.3}");
            }
            println!("chi2_F = {:.4}", report.chi2);
            println!(
                "F_F = {:.4} vs critical value {:.4} at alpha {:.2} -> {}",
                report.f_statistic,
                report.critical_value,
                alpha,
                if report.significant {
                    "reject equivalence"
                } else {
                    "cannot reject equivalence"
                }
            );
            println!("critical difference CD = {:.4}", report.critical_difference);
            if report.significant_pairs.is_empty() {
                println!("no pair differs by more than CD");
            } else {
                for (a, b) in &report.significant_pairs {
                    println!("  {a} vs {b}: significant");
                }
            }
            Ok(())
        }
        Command::InspectGraph { graph, oracle } => {
            let report = inspect_graph(&graph, oracle.as_deref())?;
            println!("labels: {}", report.labels);
            println!("mean off-diagonal weight: {:.4}", report.mean_off_diagonal);
            println!("max off-diagonal weight: {:.4}", report.max_off_diagonal);
            if let Some(pcc) = report.pcc_vs_oracle {
                println!("PCC vs oracle: {pcc:.4}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
