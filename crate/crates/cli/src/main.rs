//! `landprobe`: generate scenes, train encoders, explain them with concepts,
//! and emit plot-ready tables.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! command fails at run time.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "landprobe",
    version,
    about = "Rank-N-Contrast probing and concept explanations on synthetic land cover"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (overrides the config file and LANDPROBE_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the labelled task dataset with a stratified split.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of scenes.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Generate one scene set per concept.
    GenConcepts {
        #[command(flatten)]
        common: Common,
        /// Scenes per concept.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain with Rank-N-Contrast and fit the linear probe.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also train the supervised L1 baseline with the same budget.
        #[arg(long)]
        baseline: bool,
        /// Also fit a probe on the untrained encoder.
        #[arg(long)]
        random_init: bool,
    },
    /// CAVs, sensitivities, TCAV scores, profiles and alignment.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Encoder variant whose checkpoint is explained.
        #[arg(long, default_value = "rnc-pretrained")]
        variant: String,
        /// Restrict to one sensitivity method.
        #[arg(long, value_parser = ["plain", "ig"])]
        method: Option<String>,
        /// Comma-separated layer indices (default: all).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Two-component PCA projection of the embeddings.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "rnc-pretrained")]
        variant: String,
        /// Split to project, or `all`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Collect metrics, TCAV scores and concept accuracy into one summary.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes mapped onto exit codes.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData { common, n } => commands::gen_data(&common, n),
        Command::GenConcepts { common, n } => commands::gen_concepts(&common, n),
        Command::Train {
            common,
            baseline,
            random_init,
        } => commands::train(&common, baseline, random_init),
        Command::Explain {
            common,
            variant,
            method,
            layers,
        } => commands::explain(&common, &variant, method.as_deref(), layers),
        Command::Project { common, variant, split } => commands::project(&common, &variant, &split),
        Command::Report { common } => commands::report(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
