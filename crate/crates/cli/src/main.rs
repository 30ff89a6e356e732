//! `qcfs`: train QCFS networks, convert them to spiking networks, evaluate,
//! sweep, verify the error analysis and account for energy.

mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qcfs_core::{Architecture, Error};

/// Exit codes.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "qcfs",
    version,
    about = "QCFS training, ANN-to-SNN conversion and spiking simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a QCFS ANN and write its checkpoint.
    Train(TrainArgs),
    /// Convert an ANN checkpoint into an SNN checkpoint.
    Convert(ConvertArgs),
    /// Accuracy against the number of time-steps, as CSV `T,accuracy`.
    Eval(EvalArgs),
    /// Train one model per quantization step and evaluate each over a T grid.
    #[command(name = "sweep-l")]
    SweepL(SweepArgs),
    /// Numerical checks of the conversion-error analysis.
    Verify(VerifyArgs),
    /// ANN FLOP and SNN synaptic-operation energy, as CSV `kind,ops,energy_joules`.
    Energy(EnergyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Mlp,
    ConvSmall,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Mlp => Architecture::Mlp,
            ArchArg::ConvSmall => Architecture::ConvSmall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Mnist,
    Blobs,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    pub dataset: DatasetArg,
    /// Directory holding the four uncompressed MNIST IDX files.
    #[arg(long, env = "QCFS_DATA_DIR", default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Seed of the synthetic blob data and of its train/test split.
    #[arg(long, default_value_t = 7)]
    pub data_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    #[arg(long, value_enum, default_value = "mlp")]
    pub arch: ArchArg,
    #[command(flatten)]
    pub data: DataArgs,
    /// Shift φ inside the floor; 0 trains the no-shift variant.
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KeepArg {
    /// Weights after the final epoch.
    Last,
    /// Weights of the epoch with the highest test accuracy.
    Best,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Quantization steps of the QCFS activations.
    #[arg(long = "L", default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub levels: u32,
    #[arg(long, value_enum, default_value = "last")]
    pub keep: KeepArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum V0Mode {
    /// `v0 = θ·φ` with the layer's own shift.
    Shift,
    /// `v0 = 0`.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ThresholdMode {
    /// `θ = λ`.
    Lambda,
    /// `θ` = largest preactivation seen on calibration data.
    MaxAct,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "shift")]
    pub v0_mode: V0Mode,
    #[arg(long, value_enum, default_value = "lambda")]
    pub threshold_mode: ThresholdMode,
    /// Calibration data for `--threshold-mode max-act` (training split).
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub calib_samples: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Time-steps to report; duplicates are dropped and the list is sorted.
    #[arg(long = "T-list", value_delimiter = ',', default_value = "1,2,4,8,16,32,64",
          value_parser = clap::value_parser!(u64).range(1..))]
    pub t_list: Vec<u64>,
    /// Treat the checkpoint as an ANN and report its accuracy alone.
    #[arg(long)]
    pub ann: bool,
    /// Evaluate only the first N test samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write the full trace of the first test sample as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long = "L-list", value_delimiter = ',', default_value = "2,4,8",
          value_parser = clap::value_parser!(u32).range(1..))]
    pub l_list: Vec<u32>,
    #[arg(long = "T-list", value_delimiter = ',', default_value = "1,2,4,8,16,32,64",
          value_parser = clap::value_parser!(u64).range(1..))]
    pub t_list: Vec<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Check {
    /// Zero-mean rounding error under uniform input, plus a skewed density.
    Lemma1,
    /// Zero expected conversion error with the shift, for any T and L.
    Theorem2,
    /// Membrane potentials stay below θ with positive-weight-sum thresholds.
    Theorem3,
    /// The three spike-timing scenarios.
    Unevenness,
    /// Constant-input spike counts against the closed-form estimate.
    Eq12,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub check: Check,
    #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Time-steps; each check has its own default grid when omitted.
    #[arg(long = "T", value_parser = clap::value_parser!(u64).range(1..))]
    pub horizon: Option<u64>,
    /// Quantization steps for `theorem2`.
    #[arg(long = "L", default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub levels: u32,
    /// Shift for `theorem2`.
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
}

#[derive(Args, Debug)]
pub struct EnergyArgs {
    #[arg(long)]
    pub ann: PathBuf,
    #[arg(long)]
    pub snn: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long = "T", value_parser = clap::value_parser!(u64).range(1..))]
    pub horizon: u64,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A check ran to completion and reported a failure.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return EXIT_VERIFY;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_) | Error::Conversion { .. } | Error::Transform { .. }) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Convert(a) => commands::convert(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SweepL(a) => commands::sweep(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Energy(a) => commands::energy(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
