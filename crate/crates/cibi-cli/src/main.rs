//! `cibi`: a desk-scale laboratory for studying and removing superficial
//! correlations in visual question answering models.

mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cibi_core::data::Split;

use crate::fail::EXIT_USAGE;

#[derive(Parser)]
#[command(
    name = "cibi",
    version,
    about = "Synthetic VQA bias laboratory: generate biased corpora, train \
             debiased models, and score them against exact causal oracles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the configured causal model
    Gen {
        /// TOML config file; defaults apply for missing keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of samples
        #[arg(long)]
        n: usize,
        /// Which split's answer priors to use
        #[arg(long)]
        split: Split,
        /// Output dataset path (JSON lines)
        #[arg(long)]
        out: PathBuf,
        /// Generation seed (overrides scm.seed)
        #[arg(long)]
        seed: Option<String>,
    },
    /// Report co-occurrence bias in a dataset
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset to analyze
        #[arg(long)]
        data: PathBuf,
        /// Output directory for CSV and JSON reports
        #[arg(long)]
        out: PathBuf,
        /// Tokens to list per answer in the bias ranking
        #[arg(long)]
        top_k: Option<String>,
    },
    /// Train a model and write a checkpoint directory
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<String>,
        /// Contrastive loss weight
        #[arg(long)]
        lambda: Option<String>,
        /// Contrastive temperature
        #[arg(long)]
        tau: Option<String>,
        #[arg(long)]
        epochs: Option<String>,
    },
    /// Score a checkpoint on a dataset
    Eval {
        /// Checkpoint directory or file
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation dataset
        #[arg(long)]
        data: PathBuf,
        /// Output directory for reports
        #[arg(long)]
        out: PathBuf,
        /// Config for oracle scoring; defaults to the checkpoint's own
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset, enables answer-distribution recovery scoring
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Train and score every branch combination
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long)]
        tau: Option<String>,
        #[arg(long)]
        n_train: Option<String>,
        #[arg(long)]
        n_test: Option<String>,
    },
    /// Train the full model across a grid of contrastive weights
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        tau: Option<String>,
        /// Comma-separated grid, e.g. 0.0,0.2,0.4
        #[arg(long)]
        lambdas: Option<String>,
    },
    /// Render saved machine-readable results as text tables
    Report {
        /// Directory holding report.json / ablation.json / sweep.json
        #[arg(long)]
        dir: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), fail::CliError> {
    match cli.command {
        Command::Gen {
            config,
            n,
            split,
            out,
            seed,
        } => commands::gen(commands::GenArgs {
            config,
            n,
            split,
            out,
            seed,
        }),
        Command::Analyze {
            config,
            data,
            out,
            top_k,
        } => commands::analyze(commands::AnalyzeArgs {
            config,
            data,
            out,
            top_k,
        }),
        Command::Train {
            config,
            data,
            out,
            seed,
            lambda,
            tau,
            epochs,
        } => commands::train(commands::TrainArgs {
            config,
            data,
            out,
            seed,
            lambda,
            tau,
            epochs,
        }),
        Command::Eval {
            ckpt,
            data,
            out,
            config,
            train_data,
        } => commands::eval(commands::EvalArgs {
            ckpt,
            data,
            out,
            config,
            train_data,
        }),
        Command::Ablate {
            config,
            out,
            seed,
            lambda,
            tau,
            n_train,
            n_test,
        } => commands::ablate(commands::AblateArgs {
            config,
            out,
            seed,
            lambda,
            tau,
            n_train,
            n_test,
        }),
        Command::Sweep {
            config,
            out,
            seed,
            tau,
            lambdas,
        } => commands::sweep(commands::SweepArgs {
            config,
            out,
            seed,
            tau,
            lambdas,
        }),
        Command::Report { dir } => commands::report(commands::ReportArgs { dir }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render_line());
            ExitCode::from(e.code as u8)
        }
    }
}
