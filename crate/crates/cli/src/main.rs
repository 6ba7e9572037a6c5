mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(lsirt_core::Error),
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(lsirt_core::Error::Io(_) | lsirt_core::Error::Format(_)) => 4,
            CliError::Core(lsirt_core::Error::Training { source, .. })
                if matches!(**source, lsirt_core::Error::Io(_)) =>
            {
                4
            }
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<lsirt_core::Error> for CliError {
    fn from(e: lsirt_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "lsirt", version, about = "Learned SIRT reconstruction experiments")]
struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "LSIRT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom volume.
    Phantom(PhantomArgs),
    /// Forward project a volume and add noise.
    Simulate(SimulateArgs),
    /// Reconstruct a sinogram.
    Reconstruct(ReconstructArgs),
    /// Train a learned SIRT model.
    Train(TrainArgs),
    /// Compare a reconstruction against a reference.
    Eval(EvalArgs),
    /// Write a windowed slice as an 8-bit image.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// triangles, ellipsoids, shepp2d, shepp3d or gauss-square.
    pub family: String,
    /// Grid size; a single value is used for every axis.
    #[arg(required = true, num_args = 1..=3)]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub pitch: f64,
    /// Peak of the Gaussian for gauss-square.
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    pub volume: PathBuf,
    /// Geometry file (TOML with `kind = "parallel"` or `"cone"`).
    #[arg(long, conflicts_with = "preset")]
    pub geometry: Option<PathBuf>,
    /// Take the geometry from a training preset.
    #[arg(long)]
    pub preset: Option<String>,
    /// none, low, medium, high or a standard deviation.
    #[arg(long, default_value = "none")]
    pub noise: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    pub sinogram: PathBuf,
    /// fbp, fdk, sirt or lsirt.
    #[arg(long)]
    pub algo: String,
    /// Reconstruction grid, e.g. 64,64 or 32,32,32.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub pitch: f64,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Use the fixed-step SIRT update instead of the scaled one.
    #[arg(long)]
    pub fixed_step: bool,
    /// Fixed SIRT step; defaults to 1.8/‖A‖².
    #[arg(long, requires = "fixed_step")]
    pub lambda: Option<f64>,
    /// none, ramp or hann.
    #[arg(long, default_value = "ramp")]
    pub filter: String,
    #[arg(long, default_value_t = 1.0)]
    pub cutoff: f64,
    /// Model checkpoint for lsirt.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Extra iterates to save as `<out>_<k>.tvol`.
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Vec<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// lsirt or lsirt-star.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Directory of `.tvol` training volumes.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub recon: PathBuf,
    /// Reference volume for psnr and ssim.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Any of psnr, ssim, cnr, fwhm, dft-slice.
    #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
    pub metrics: Vec<String>,
    /// ROI file for cnr and fwhm.
    #[arg(long)]
    pub rois: Option<PathBuf>,
    /// Data range for psnr/ssim; defaults to the reference's max − min.
    #[arg(long)]
    pub data_range: Option<f64>,
    /// Plane for dft-slice.
    #[arg(long, default_value = "coronal")]
    pub plane: String,
    /// Slice index for dft-slice; defaults to the middle slice.
    #[arg(long)]
    pub index: Option<usize>,
    /// JSON report; a one-row CSV is written beside it.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    pub volume: PathBuf,
    #[arg(long, default_value = "axial")]
    pub plane: String,
    /// Defaults to the middle slice.
    #[arg(long)]
    pub index: Option<usize>,
    /// Window `lo,hi` mapped to 0..255.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub window: Vec<f64>,
    /// Window is given in HU; voxels are converted with ×10³.
    #[arg(long)]
    pub hu: bool,
    /// `.png` or `.pgm`.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Export(a) => commands::export(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
