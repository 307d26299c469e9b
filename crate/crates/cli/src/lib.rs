//! The `cldta` command line: synthetic banks, feature extraction,
//! pretraining, calibration, prediction and the evaluation protocols, driven
//! by one JSON config. [`run`] is the whole program; the binary only forwards
//! its arguments.

mod commands;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cldta", version, about = "EEG emotion recognition: contrastive pretraining and few-shot calibration")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Sample bank directory.
    #[arg(long, global = true)]
    pub bank: Option<PathBuf>,
    /// Model checkpoint file.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub k_per_class: Option<usize>,
    /// Worker threads for folds and sweep points; 1 is the reference.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a seeded synthetic bank to --out.
    GenSynth {
        #[arg(long, value_enum)]
        mode: Option<SynthModeArg>,
    },
    /// Preprocesses the raw trials of --bank into a feature bank at --out.
    ExtractFeatures,
    /// Contrastive pretraining on every sample of --bank.
    Pretrain,
    /// Few-shot calibration of --checkpoint on labelled samples of --bank.
    Calibrate,
    /// Prints `label,probabilities...` for every sample of --bank.
    Predict,
    /// Accuracy under a subject protocol.
    Evaluate {
        #[arg(long, value_enum, default_value = "losocv")]
        mode: EvalMode,
    },
    /// Accuracy of --checkpoint under electrode failure or added noise.
    Robustness {
        #[arg(long, value_enum, default_value = "failure")]
        mode: RobustMode,
    },
    /// Channel connectivity of --checkpoint.
    Connectivity,
    /// Writes per-sample features of one stage as CSV.
    ExportFeatures {
        #[arg(long, value_enum, default_value = "raw")]
        mode: StageArg,
    },
    /// Gradient check of the configured model on random inputs.
    GradCheck,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SynthModeArg {
    Features,
    Timeseries,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum EvalMode {
    Losocv,
    SubjectDependent,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum RobustMode {
    Failure,
    Noise,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum StageArg {
    Raw,
    Encoded,
    Calibrated,
}

/// Errors of a run: usage problems exit with 2, everything else with 1.
pub enum Failure {
    Usage(String),
    Run(cldta::Error),
}

impl From<cldta::Error> for Failure {
    fn from(e: cldta::Error) -> Self {
        Failure::Run(e)
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// exit code: 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", Cli::command().render_usage());
            2
        }
        Err(Failure::Run(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            1
        }
    }
}
