//! `dsn`: train, run, evaluate, and compress with deep sampling networks.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsn_core::{Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "dsn", version, about = "Learned down/up-sampling for images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Co-train a model on a directory of images.
    Train(TrainArgs),
    /// Learned down-sampling of one image.
    Down(InferArgs),
    /// Learned up-sampling of one image.
    Up(InferArgs),
    /// Down then up; prints PSNR/SSIM against the input.
    Roundtrip(RoundtripArgs),
    /// Per-image and mean PSNR/SSIM over a directory.
    Eval(EvalArgs),
    /// Train one up-sampler per classical degradation and cross-test them.
    Degmatrix(DegmatrixArgs),
    /// Encode an image into a bundle.
    Compress(CompressArgs),
    /// Decode a bundle back to a full-size image.
    Decompress(DecompressArgs),
    /// Rate/distortion table for a directory of images.
    Rdreport(RdreportArgs),
    /// Finite-difference verification of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Key-value training config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (defaults to the resumed run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the state saved in a previous run directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep the down-sampler fixed.
    #[arg(long)]
    pub freeze_down: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Network size: `standard` or `tiny`.
    #[arg(long, default_value = "standard")]
    pub arch: String,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Centre-crop inputs whose size is not a multiple of the scale.
    #[arg(long)]
    pub auto_crop: bool,
}

#[derive(Args, Debug)]
pub struct RoundtripArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub input: PathBuf,
    /// Optional restored image.
    pub output: Option<PathBuf>,
    /// Also score a classical down/up pair with this kernel.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Border pixels excluded from the metrics (defaults to the scale).
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub auto_crop: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Classical kernels to compare against; repeatable.
    #[arg(long = "baseline")]
    pub baselines: Vec<String>,
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DegmatrixArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
    /// Use the built-in synthetic corpus (20 train, 5 test images).
    #[arg(long, conflicts_with_all = ["train", "test"])]
    pub synthetic: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "tiny")]
    pub arch: String,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct CodecArgs {
    /// `deflate` or `external`.
    #[arg(long, default_value = "deflate")]
    pub codec: String,
    /// External encoder template with `{in}` and `{out}` placeholders.
    #[arg(long)]
    pub encode_cmd: Option<String>,
    /// External decoder template.
    #[arg(long)]
    pub decode_cmd: Option<String>,
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    /// Trained model; omit to use a classical kernel.
    #[arg(long, conflicts_with = "baseline")]
    pub model: Option<PathBuf>,
    /// Classical kernel used instead of a model.
    #[arg(long)]
    pub baseline: Option<String>,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[command(flatten)]
    pub transform: TransformArgs,
    /// Scale for classical baselines.
    #[arg(long)]
    pub scale: Option<usize>,
    #[command(flatten)]
    pub codec: CodecArgs,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecompressArgs {
    #[command(flatten)]
    pub transform: TransformArgs,
    #[command(flatten)]
    pub codec: CodecArgs,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct RdreportArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Classical kernels; defaults to bicubic.
    #[arg(long = "baseline")]
    pub baselines: Vec<String>,
    /// Scale for classical baselines when no model is given.
    #[arg(long)]
    pub scale: Option<usize>,
    #[command(flatten)]
    pub codec: CodecArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates checked per case.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Optional CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error raised for bad flag combinations or values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Signals a numeric failure that was already reported (gradcheck).
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
