//! Config-driven experiment runner for `hsl-core`.
//!
//! Each subcommand reads an [`ExperimentConfig`], writes CSV tables into the
//! output directory and always finishes by writing a [`RunManifest`] that
//! records the checks it performed.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod table;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

pub use config::ExperimentConfig;
pub use manifest::{Check, CheckStatus, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] hsl_core::Error),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hsl",
    version,
    about = "Spectral diffusion laboratory experiment runner"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Gaussian posterior sampling, exact-start fixed point and convergence.
    VerifyGaussian(RunArgs),
    /// Expected squared score norm against its bounds.
    ScoreNorm(RunArgs),
    /// Per-bin linear fits of denoising score matching data.
    DsmLinear(RunArgs),
    /// Quadrature oracle against closed-form scores.
    OracleCompare(RunArgs),
    /// Train the neural operator on the stylized example.
    TrainStylized(RunArgs),
    /// Sample the trained operator on several grid sizes.
    SampleStylized(RunArgs),
}

#[derive(Debug, Clone, PartialEq, Eq, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory; beats `HSL_OUT` and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::VerifyGaussian(_) => "verify-gaussian",
            Command::ScoreNorm(_) => "score-norm",
            Command::DsmLinear(_) => "dsm-linear",
            Command::OracleCompare(_) => "oracle-compare",
            Command::TrainStylized(_) => "train-stylized",
            Command::SampleStylized(_) => "sample-stylized",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::VerifyGaussian(a)
            | Command::ScoreNorm(a)
            | Command::DsmLinear(a)
            | Command::OracleCompare(a)
            | Command::TrainStylized(a)
            | Command::SampleStylized(a) => a,
        }
    }
}

/// Everything a subcommand needs besides its own config block.
#[derive(Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Context {
    /// A seed for one named experiment, derived from the master seed.
    pub fn derive_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Output directory: `--out`, then `HSL_OUT`, then the config.
pub fn resolve_out_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os("HSL_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => config.output.directory.clone(),
    }
}

/// Runs one subcommand and writes its manifest. Returns the manifest, or an
/// error if the config could not be read or the output directory created.
pub fn run(command: &Command) -> Result<RunManifest, CliError> {
    let args = command.args();
    let config = ExperimentConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(config.sde.seed);
    let out_dir = resolve_out_dir(args.out.as_deref(), &config);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let name = command.name();
    std::fs::write(
        out_dir.join(format!("{name}.config.toml")),
        config.to_toml(),
    )?;

    let mut manifest = RunManifest::new(name, &config, seed, args.threads);
    let ctx = Context {
        config,
        seed,
        out_dir,
    };
    let started = Instant::now();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        builder = builder.num_threads(n);
    }
    let result = match builder.build() {
        Ok(pool) => pool.install(|| match command {
            Command::VerifyGaussian(_) => commands::gaussian::verify_gaussian(&ctx, &mut manifest),
            Command::ScoreNorm(_) => commands::score_norm::score_norm(&ctx, &mut manifest),
            Command::DsmLinear(_) => commands::dsm::dsm_linear(&ctx, &mut manifest),
            Command::OracleCompare(_) => commands::oracle::oracle_compare(&ctx, &mut manifest),
            Command::TrainStylized(_) => commands::stylized::train_stylized(&ctx, &mut manifest),
            Command::SampleStylized(_) => commands::stylized::sample_stylized(&ctx, &mut manifest),
        }),
        Err(e) => Err(CliError::Config(format!("cannot build thread pool: {e}"))),
    };
    if let Err(e) = result {
        manifest.error = Some(e.to_string());
    }
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}
