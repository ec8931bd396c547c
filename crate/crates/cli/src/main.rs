mod commands;
mod config;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hytrel::tasks::TaskKind;
use hytrel::ErrorCategory;

/// Exit statuses: 0 success, 1 usage, 2 data, 3 numeric.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: String) -> Self {
        Self { code: 1, message }
    }

    pub fn data(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn numeric(message: String) -> Self {
        Self { code: 3, message }
    }
}

impl From<hytrel::Error> for Failure {
    fn from(e: hytrel::Error) -> Self {
        let code = match e.category() {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numeric => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hytrel", version, about = "Hypergraph table encoder: pretraining, fine-tuning and invariance checks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config; flags override it, it overrides defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for artifacts and the manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed (falls back to the config file, then HYTREL_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Data-parallel width.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a token vocabulary from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Pretrain an encoder on a corpus.
    Pretrain {
        #[arg(long, value_parser = ["electra", "contrastive"])]
        objective: Option<String>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Continue from a checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Share of the corpus (taken from the end) held out for evaluation.
        #[arg(long, default_value_t = 0.0)]
        holdout: f64,
    },
    /// Export cell, row, column and table representations.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Fine-tune a task head and score a held-out split.
    Finetune {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Pretrained encoder; a fresh one is initialised otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        num_labels: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Training share of the labelled examples.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long)]
        freeze_encoder: bool,
    },
    /// Generate a synthetic corpus, with labels for a task.
    Synth {
        /// cta, cpa, ttd, tsp, or `corpus` for unlabelled pretraining tables.
        #[arg(long)]
        task: String,
        #[arg(long)]
        size: usize,
    },
    /// Encode tables under random row/column permutations and report distances.
    VerifyInvariance {
        #[arg(long, default_value_t = 100)]
        tables: usize,
        #[arg(long, default_value_t = 20)]
        perms: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measure how far cell swaps that break row/column structure move the table representation.
    ProbeExcessive {
        #[arg(long, default_value_t = 100)]
        tables: usize,
        #[arg(long, default_value_t = 1)]
        shuffles: usize,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        /// Relative shift a swap must exceed.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Share of tables that must exceed the tolerance.
        #[arg(long, default_value_t = 0.95)]
        required: f64,
    },
    /// Compare encoder equality with 1-WL indistinguishability on small tables.
    WlCheck {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 3)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        cols: usize,
        #[arg(long, default_value_t = 3)]
        alphabet: usize,
    },
    /// Time one encoder layer across table sizes.
    Profile {
        /// Comma-separated `NxM` sizes, ascending by cell count.
        #[arg(long, default_value = "10x10,20x10,40x10,80x10")]
        sizes: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildVocab { .. } => "build-vocab",
            Command::Pretrain { .. } => "pretrain",
            Command::Embed { .. } => "embed",
            Command::Finetune { .. } => "finetune",
            Command::Synth { .. } => "synth",
            Command::VerifyInvariance { .. } => "verify-invariance",
            Command::ProbeExcessive { .. } => "probe-excessive",
            Command::WlCheck { .. } => "wl-check",
            Command::Profile { .. } => "profile",
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::dispatch(cli, argv[1..].to_vec()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
