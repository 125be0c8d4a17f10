//! `comet` command-line harness.
//!
//! Exit codes: 0 ok, 2 I/O or unreadable input, 3 training divergence,
//! 4 memory-infeasible batch, 64 usage or parameter error, 65 CSV schema
//! mismatch. Relative output paths are resolved under `$COMET_OUT_DIR` when
//! that variable is set.

mod analyze;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_IO: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_MEMORY: u8 = 4;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_SCHEMA: u8 = 65;
pub const EXIT_INTERNAL: u8 = 70;

pub const OUT_DIR_ENV: &str = "COMET_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "comet", version, about = "Error-bounded activation compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress a CMTT tensor into a CMTZ stream.
    Compress(CompressArgs),
    /// Expand a CMTZ stream back into a CMTT tensor.
    Decompress {
        input: PathBuf,
        output: PathBuf,
    },
    /// Report element-wise differences between two CMTT tensors.
    Compare {
        original: PathBuf,
        reconstructed: PathBuf,
        #[arg(long)]
        eb: f64,
    },
    /// Write a generated CMTT tensor.
    MakeTensor(MakeTensorArgs),
    /// Gradient-error study with and without zero preservation.
    ExperimentErrorProp(ErrorPropArgs),
    /// Estimate the gradient-error coefficient by Monte Carlo.
    Calibrate(CalibrateArgs),
    /// Train the desk-scale CNN.
    Train(TrainArgs),
    /// Summarize one or more CSV outputs.
    Analyze {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Optional per-column summary CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct CompressArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    eb: f64,
    #[arg(long, default_value_t = comet::codec::DEFAULT_RADIUS)]
    radius: u32,
    #[arg(long)]
    no_preserve_zeros: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fill {
    Constant,
    Uniform,
    Gaussian,
    ReluSparse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct MakeTensorArgs {
    output: PathBuf,
    /// Extents joined by `x`, e.g. `32x8x28x28`.
    #[arg(long)]
    dims: String,
    #[arg(long, value_enum, default_value = "relu-sparse")]
    fill: Fill,
    #[arg(long, default_value_t = 0.0)]
    value: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    hi: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mean: f64,
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
}

#[derive(Args, Debug)]
struct ErrorPropArgs {
    #[arg(long, default_value = "3x8x8,k3x3,s1,o16")]
    layer_shape: String,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    eb: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target fraction of nonzero activations.
    #[arg(long, default_value_t = 0.5)]
    nonzero_ratio: f64,
    /// Error draws per instance.
    #[arg(long, default_value_t = 32)]
    draws: usize,
    /// Coefficient used for `sigma_pred`.
    #[arg(long, default_value_t = 0.32)]
    a: f64,
    #[arg(long, default_value = "error_prop.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "3x8x8,k3x3,s1,o16")]
    layer_shape: String,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    eb: f64,
    #[arg(long, default_value_t = 0.5)]
    nonzero_ratio: f64,
    #[arg(long, default_value_t = 32)]
    draws: usize,
    /// One sample, a 16-weight 1x1 conv and dense activations.
    #[arg(long)]
    single_element: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value file with training, controller and dataset settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline, comet, comet-static, inject:<eb> or inject:<eb>:plain.
    #[arg(long, default_value = "comet")]
    mode: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "train.csv")]
    out: PathBuf,
    /// Also write the per-interval compression plans.
    #[arg(long)]
    plan_out: Option<PathBuf>,
    /// Save final parameters into this directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Do not run the baseline reference for comparison.
    #[arg(long)]
    no_reference: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run::dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
