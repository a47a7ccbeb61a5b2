//! `restore`: synthesise data, train, estimate labels, evaluate and report.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use restore_core::training::TrainMode;

use config::Overrides;

/// Exit status 1: bad input or configuration.
pub const EXIT_VALIDATION: u8 = 1;
/// Exit status 2: runtime or numerical failure.
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug)]
pub enum CliError {
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

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<restore_core::Error> for CliError {
    fn from(e: restore_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "restore", version, about = "Multi-domain restoration of short-scan image volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GridFlags {
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub coarse: Option<f64>,
    #[arg(long)]
    pub fine: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a synthetic multi-domain dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of training domains.
        #[arg(long)]
        domains: Option<usize>,
        /// Add a held-out domain interpolated between two training domains,
        /// written as FROM,TO,ALPHA[,SUBJECTS].
        #[arg(long, value_name = "FROM,TO,ALPHA[,SUBJECTS]")]
        mixture: Vec<String>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train on a single domain (required by m1 and m2 on multi-domain data).
        #[arg(long)]
        domain: Option<usize>,
    },
    /// Estimate the label of a calibration set by grid search.
    EstimateLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory holding the calibration subjects.
        #[arg(long)]
        calibration: PathBuf,
        /// Use only subjects of this domain index (training or mixture).
        #[arg(long)]
        domain: Option<usize>,
        #[command(flatten)]
        grid: GridFlags,
        /// Also write the objective at every evaluated point.
        #[arg(long)]
        surface: bool,
        /// Gradient refinement steps after the grid search.
        #[arg(long, default_value_t = 0)]
        refine_steps: usize,
    },
    /// Correct every volume of a split and score it against the reference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated label used for every volume; defaults to each
        /// subject's own one-hot label.
        #[arg(long)]
        label: Option<String>,
        /// Read the label from an `estimate-label` JSON file.
        #[arg(long, conflicts_with = "label")]
        label_file: Option<PathBuf>,
        /// Evaluate only this domain index.
        #[arg(long)]
        domain: Option<usize>,
        #[arg(long, default_value = "val", value_parser = ["train", "val", "calibration"])]
        split: String,
        /// Also score the uncorrected short-scan input.
        #[arg(long)]
        baseline: bool,
    },
    /// Summaries, Bland-Altman and correlation data from evaluation outputs.
    Report {
        #[command(flatten)]
        common: Common,
        /// `metrics.json` files (or evaluation directories).
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: restore_core::Error| e.to_string())
}

fn configure_workers() -> Result<(), CliError> {
    let Ok(v) = std::env::var("RESTORE_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("RESTORE_NUM_WORKERS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_workers()?;
    match cli.command {
        Command::Synth { common, domains, mixture } => {
            let o = Overrides { domains, ..common.overrides() };
            commands::synth(&common, &o, &mixture)
        }
        Command::Train { common, data, mode, epochs, domain } => {
            let o = Overrides { mode, epochs, ..common.overrides() };
            commands::train(&common, &o, data, domain)
        }
        Command::EstimateLabel { common, checkpoint, calibration, domain, grid, surface, refine_steps } => {
            let o = Overrides {
                epsilon: grid.epsilon,
                coarse: grid.coarse,
                fine: grid.fine,
                ..common.overrides()
            };
            commands::estimate_label(&common, &o, checkpoint, &calibration, domain, surface, refine_steps)
        }
        Command::Evaluate { common, checkpoint, data, label, label_file, domain, split, baseline } => {
            let o = common.overrides();
            commands::evaluate(&common, &o, commands::EvalArgs {
                checkpoint,
                data,
                label,
                label_file,
                domain,
                split,
                baseline,
            })
        }
        Command::Report { common, metrics } => {
            let o = common.overrides();
            report::report(&common, &o, &metrics)
        }
    }
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            ..Default::default()
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::Validation(e.to_string());
            emit(&err);
            return ExitCode::from(err.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            emit(&err);
            ExitCode::from(err.code())
        }
    }
}

fn emit(err: &CliError) {
    let body = serde_json::json!({ "error": { "kind": err.kind(), "message": err.message().trim() } });
    eprintln!("{body}");
}
