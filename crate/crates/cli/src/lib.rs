//! Command-line driver. [`run`] parses argv, executes one subcommand and
//! returns the process exit code: 0 on success, 1 on usage errors, 2 on data
//! errors.

mod commands;
mod runlog;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use runlog::{run_log_path, RunLog};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(volt_core::Error),
}

impl From<volt_core::Error> for CliError {
    fn from(e: volt_core::Error) -> Self {
        use volt_core::Error as E;
        match e {
            E::Config(m) => CliError::Usage(m),
            E::UnsupportedNoll(_) | E::HeadDivisibility { .. } | E::TimeOutOfRange(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "error: {e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "volt", version, about = "Wide-field microscopy simulation, deconvolution and stochastic-interpolant reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a point-spread function.
    Psf(PsfArgs),
    /// Generate a phantom dataset with simulated measurements.
    Phantom(PhantomArgs),
    /// Blur and add noise to a clean volume.
    Simulate(SimulateArgs),
    /// Classical deconvolution.
    Deconv(DeconvArgs),
    /// Train the reconstruction networks on a dataset.
    Train(TrainArgs),
    /// Reconstruct a measurement with a trained checkpoint.
    Sample(SampleArgs),
    /// PSNR, SSIM and MS-SSIM of a prediction against ground truth.
    Eval(EvalArgs),
    /// Credibility statistics of an ensemble against ground truth.
    Credibility(CredibilityArgs),
    /// Maximum-intensity projection with depth map.
    Mip(MipArgs),
    /// Analytic attention-memory model.
    Memmodel(MemmodelArgs),
    /// Re-execute a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct PsfArgs {
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    /// Numerical aperture.
    #[arg(long)]
    pub na: Option<f64>,
    /// Emission wavelength (um).
    #[arg(long)]
    pub lambda_em: Option<f64>,
    /// Excitation wavelength (um), metadata only.
    #[arg(long)]
    pub lambda_ex: Option<f64>,
    /// Immersion refractive index.
    #[arg(long)]
    pub n0: Option<f64>,
    /// Grid as NXxNYxNZ, e.g. 64x64x16.
    #[arg(long)]
    pub dims: Option<String>,
    /// Voxel spacing as DX,DY,DZ in um.
    #[arg(long)]
    pub spacing: Option<String>,
    /// Zernike aberration NOLL=WAVES; repeatable.
    #[arg(long = "zernike")]
    pub zernike: Vec<String>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Expected photons at the brightest blurred voxel.
    #[arg(long)]
    pub photons: Option<f64>,
    #[arg(long)]
    pub read_sigma: Option<f64>,
    /// Worker threads; output bytes do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Clean volume.
    #[arg(long)]
    pub input: PathBuf,
    /// Centered PSF volume.
    #[arg(long)]
    pub psf: PathBuf,
    #[arg(long, default_value_t = 1000.0)]
    pub photons: f64,
    #[arg(long, default_value_t = 0.01)]
    pub read_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stream index of this measurement.
    #[arg(long, default_value_t = 0)]
    pub index: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DeconvMethod {
    Rl,
    Wiener,
    Cls,
}

#[derive(Debug, Args)]
pub struct DeconvArgs {
    #[arg(value_enum)]
    pub method: DeconvMethod,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub psf: PathBuf,
    /// RL iterations, or the sweep ceiling with --sweep-gt.
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    /// Regularization weights; several values need --sweep-gt.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    /// Unit Laplacian weights instead of spacing-aware ones.
    #[arg(long)]
    pub isotropic: bool,
    /// Ground truth for picking the PSNR-best iteration count or lambda.
    #[arg(long)]
    pub sweep_gt: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    X1,
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Volt,
    FlowMatching,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `phantom`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Training configuration JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub loss_mode: Option<LossArg>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Per-network gradient-norm clip; 0 disables.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Drop the measurement input channel.
    #[arg(long)]
    pub no_x0_conditioning: bool,
    /// Worker threads over batch members; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Checkpoint path.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sde,
    Ode,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Measurement volume.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "sde")]
    pub mode: ModeArg,
    /// Integration steps; defaults to 100 for sde and 20 for ode.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = volt_core::sampler::DEFAULT_T_CLAMP)]
    pub t_clamp: f64,
    /// Return the last x1 prediction instead of the final state.
    #[arg(long)]
    pub final_predict: bool,
    /// Worker threads over ensemble members; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Defaults to the ground-truth maximum.
    #[arg(long)]
    pub data_range: Option<f64>,
    /// JSON report; also writes a per-slice CSV next to it.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CredibilityArgs {
    /// Directory written by `sample` with at least two samples.
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = volt_core::evalsuite::credibility::DEFAULT_TAU)]
    pub tau: f64,
    /// SD floor on the normalized scale.
    #[arg(long, default_value_t = volt_core::evalsuite::credibility::DEFAULT_SD_FLOOR)]
    pub sd_floor: f64,
    /// Normalization applied to mean, SD and ground truth; defaults to the
    /// ground-truth maximum.
    #[arg(long)]
    pub data_range: Option<f64>,
    /// JSON report; the histogram CSV goes next to it.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MipArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output prefix: writes PREFIX.max.pgm, PREFIX.depth.pgm, PREFIX.csv.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Quadratic,
    Linear,
    Both,
}

#[derive(Debug, Args)]
pub struct MemmodelArgs {
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    #[arg(long, value_enum, default_value = "both")]
    pub regime: RegimeArg,
    #[arg(long)]
    pub heads: Option<u64>,
    #[arg(long)]
    pub bytes_per_element: Option<u64>,
    /// CSV output.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// Run manifest written by a previous invocation.
    pub manifest: PathBuf,
    /// Replace the recorded output path.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Parses and executes `argv` (including the program name).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::execute(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
