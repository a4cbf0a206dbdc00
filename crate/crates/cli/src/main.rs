//! `phds`: pretrain, fine-tune, evaluate and ablate toy MoE models.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime error. Failures print
//! one JSON line to stderr: `{"error":"validation","code":2,"message":"..."}`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or inputs, detected before any output is written.
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "phds",
    version,
    about = "Runtime-declared sparsity for mixture-of-experts models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AblationKind {
    Epsilon,
    KtrainSets,
    Curriculum,
    Subset,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model at fixed k = k_pre.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a base checkpoint under an oracle, naive or PHDS regime.
    Sft {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Overrides sft.regime, e.g. "phds [2,3,4] -> 2".
        #[arg(long)]
        regime: Option<String>,
    },
    /// Perplexity and accuracy of one checkpoint at one or more k.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
        /// Allow k above the checkpoint's k_pre.
        #[arg(long)]
        override_k_bound: bool,
    },
    /// Evaluate over a list of k and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
        #[arg(long)]
        override_k_bound: bool,
    },
    /// Answer agreement: one checkpoint at two k, or two checkpoints.
    Agree {
        #[command(flatten)]
        common: Common,
        /// One or two checkpoints.
        #[arg(long, num_args = 1..=2, required = true)]
        ckpt: Vec<PathBuf>,
        /// One k per checkpoint, or two k for a single checkpoint; a single
        /// value is shared by both checkpoints.
        #[arg(long, num_args = 1..=2, required = true)]
        k: Vec<usize>,
        #[arg(long)]
        override_k_bound: bool,
    },
    /// Active parameters and FLOPs per token.
    Flops {
        /// Model from a run configuration.
        #[arg(long, required_unless_present = "ckpt", conflicts_with = "ckpt")]
        config: Option<PathBuf>,
        /// Model from a checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Defaults to 1..=k_pre.
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
    },
    /// Fine-tune over a matrix of settings and write one comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        kind: AblationKind,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::Sft {
            common,
            ckpt,
            regime,
        } => commands::sft(&common, &ckpt, regime.as_deref()),
        Command::Eval {
            common,
            ckpt,
            k,
            k_list,
            override_k_bound,
        } => {
            let ks = match (k, k_list) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Validation(
                        "pass --k or --k-list, not both".into(),
                    ))
                }
                (Some(k), None) => Some(vec![k]),
                (None, ks) => ks,
            };
            commands::eval(&common, &ckpt, ks, override_k_bound)
        }
        Command::Sweep {
            common,
            ckpt,
            k_list,
            override_k_bound,
        } => commands::sweep(&common, &ckpt, &k_list, override_k_bound),
        Command::Agree {
            common,
            ckpt,
            k,
            override_k_bound,
        } => commands::agree(&common, &ckpt, &k, override_k_bound),
        Command::Flops {
            config,
            ckpt,
            k_list,
        } => commands::flops(config.as_deref(), ckpt.as_deref(), k_list),
        Command::Ablate { common, ckpt, kind } => commands::ablate(&common, &ckpt, kind),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Validation(e.kind().to_string());
            eprint!("{e}");
            report(&err);
            return ExitCode::from(err.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.code())
        }
    }
}

fn report(e: &CliError) {
    let line = serde_json::json!({ "error": e.kind(), "code": e.code(), "message": e.message() });
    eprintln!("{line}");
}
