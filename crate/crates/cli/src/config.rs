//! Experiment configuration. Every field has a default and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use hsl_core::neural_op::{AdamConfig, NoiseSchedule, OperatorArch};
use hsl_core::spectral::{build_spectrum, DecayLaw};
use hsl_core::{ModeVector, ObservationModel, ProblemSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub sde: SdeConfig,
    pub checks: ChecksConfig,
    pub score_norm: ScoreNormConfig,
    pub dsm: DsmConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub output: OutputConfig,
}

/// Observation noise per observed mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    /// `sigma_B^2 = mu_j`, i.e. unit signal-to-noise on every observed mode.
    Matched,
    Isotropic {
        sigma_b: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub dim: usize,
    pub prior: DecayLaw,
    /// Diffusion covariance law; the prior's when absent.
    pub diffusion: Option<DecayLaw>,
    pub observed: Vec<usize>,
    pub noise: NoiseConfig,
    pub horizon: f64,
    /// Observation in mode coordinates. Defaults to `sqrt(mu_j)` on observed
    /// modes.
    pub y: Option<Vec<f64>>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            prior: DecayLaw::Polynomial { alpha: 2.0 },
            diffusion: None,
            observed: vec![0, 2, 5],
            noise: NoiseConfig::Matched,
            horizon: 2.0,
            y: None,
        }
    }
}

impl ProblemConfig {
    pub fn build(&self) -> Result<ProblemSpec, CliError> {
        let prior = build_spectrum(self.prior, self.dim)?;
        let diffusion = match self.diffusion {
            Some(law) => build_spectrum(law, self.dim)?,
            None => prior.clone(),
        };
        let obs = match &self.noise {
            NoiseConfig::Matched => ObservationModel::with_noise(
                self.observed.clone(),
                self.observed
                    .iter()
                    .map(|&j| prior.eigenvalues().get(j).copied().unwrap_or(1.0).sqrt())
                    .collect(),
            )?,
            NoiseConfig::Isotropic { sigma_b } => {
                ObservationModel::isotropic(self.observed.clone(), *sigma_b)?
            }
        };
        Ok(ProblemSpec::new(prior, diffusion, obs, self.horizon)?)
    }

    pub fn observation(&self, p: &ProblemSpec) -> Result<ModeVector, CliError> {
        match &self.y {
            Some(y) if y.len() != self.dim => Err(CliError::Config(format!(
                "problem.y has {} entries, expected dim = {}",
                y.len(),
                self.dim
            ))),
            Some(y) => Ok(ModeVector(y.clone())),
            None => Ok(ModeVector(
                (0..p.dim())
                    .map(|j| {
                        if p.is_observed(j) {
                            p.prior().get(j).sqrt()
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeConfig {
    pub steps: usize,
    pub t_floor: f64,
    pub n_paths: usize,
    /// Master seed; every experiment derives its own streams from it.
    pub seed: u64,
    /// Horizons for the convergence-from-invariant-start table.
    pub horizons: Vec<f64>,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            t_floor: 1e-3,
            n_paths: 100_000,
            seed: 0,
            horizons: vec![2.0, 4.0, 6.0, 8.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksConfig {
    pub mean_stderrs: f64,
    pub var_rel_tol: f64,
    pub fixed_point_tol: f64,
    pub max_convergence_slope: f64,
    /// Also compare the analytic score norm with the uniform bound.
    pub prop3: bool,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            mean_stderrs: 3.0,
            var_rel_tol: 0.05,
            fixed_point_tol: 1e-12,
            max_convergence_slope: -0.95,
            prop3: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreNormConfig {
    /// Times at which every variant is tabulated.
    pub t_values: Vec<f64>,
    pub mc_samples: usize,
    pub mc_rel_tol: f64,
    /// Noiseless blow-up fit window and sample count.
    pub blowup_t_min: f64,
    pub blowup_t_max: f64,
    pub blowup_points: usize,
    pub blowup_slope_tol: f64,
    pub limit_t: f64,
    pub limit_rel_tol: f64,
    /// Bounded-Lipschitz test prior `(K, L)` for the uniform bound check.
    pub psi_k: f64,
    pub psi_l: f64,
    pub psi_samples: usize,
    pub psi_t_values: Vec<f64>,
}

impl Default for ScoreNormConfig {
    fn default() -> Self {
        Self {
            t_values: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 0.05, 0.1, 0.5, 1.0, 2.0],
            mc_samples: 1_000_000,
            mc_rel_tol: 0.01,
            blowup_t_min: 1e-4,
            blowup_t_max: 1e-2,
            blowup_points: 9,
            blowup_slope_tol: 0.05,
            limit_t: 1e-6,
            limit_rel_tol: 0.01,
            psi_k: 2.0,
            psi_l: 1.0,
            psi_samples: 4000,
            psi_t_values: vec![0.01, 0.03, 0.1, 0.3, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsmConfig {
    pub n_samples: usize,
    pub bins: usize,
    pub t_floor: f64,
    pub stderrs: f64,
    pub bias_allowance: f64,
    /// Also write the raw dataset (`t,mode,x0,xt,y`).
    pub export_dataset: bool,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            n_samples: 1_000_000,
            bins: 8,
            t_floor: 0.05,
            stderrs: 3.0,
            bias_allowance: 0.02,
            export_dataset: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OraclePrior {
    Gaussian,
    Mixture,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub priors: Vec<OraclePrior>,
    /// `(weight, mean, variance)` per component, in units of each mode's
    /// posterior: means are offsets in posterior standard deviations from the
    /// posterior mean, variances are multiples of the posterior variance.
    pub mixture: Vec<(f64, f64, f64)>,
    pub psi_k: f64,
    pub psi_l: f64,
    pub n_nodes: usize,
    pub half_width: f64,
    pub t_values: Vec<f64>,
    /// Lattice of `x` values in units of each mode's prior standard deviation.
    pub lattice_min: f64,
    pub lattice_max: f64,
    pub lattice_points: usize,
    pub gaussian_tol: f64,
    pub mixture_tol: f64,
    /// Sinusoidal prior: gap between the oracle and a refined oracle with
    /// twice the node density.
    pub refinement_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            priors: vec![
                OraclePrior::Gaussian,
                OraclePrior::Mixture,
                OraclePrior::Sinusoidal,
            ],
            mixture: vec![(0.4, -0.8, 0.25), (0.6, 0.9, 0.3)],
            psi_k: 2.0,
            psi_l: 1.0,
            n_nodes: 801,
            half_width: 10.0,
            t_values: vec![0.01, 0.1, 1.0],
            lattice_min: -3.0,
            lattice_max: 3.0,
            lattice_points: 21,
            gaussian_tol: 1e-7,
            mixture_tol: 1e-6,
            refinement_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: OperatorArch,
    pub optimizer: AdamConfig,
    pub schedule: NoiseSchedule,
    pub grid_min_points: usize,
    pub grid_max_points: usize,
    pub domain: (f64, f64),
    /// Checkpoint location; `<out>/checkpoint.json` when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: OperatorArch::desk(),
            optimizer: AdamConfig {
                batch_size: 128,
                steps: 5000,
                ..AdamConfig::default()
            },
            schedule: NoiseSchedule::default(),
            grid_min_points: 15,
            grid_max_points: 50,
            domain: (-3.0, 3.0),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub grid_sizes: Vec<usize>,
    /// Grid sizes outside the training range, compared against `reference_size`.
    pub extrapolation_sizes: Vec<usize>,
    pub reference_size: usize,
    pub n_samples: usize,
    pub y_values: Vec<f64>,
    pub ks_alpha: f64,
    pub min_prominence: f64,
    pub histogram_bins: usize,
    pub density_points: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            grid_sizes: vec![20, 25, 30, 35, 40],
            extrapolation_sizes: vec![60],
            reference_size: 40,
            n_samples: 2000,
            y_values: vec![-1.0, 0.0, 0.5],
            ks_alpha: 1e-3,
            min_prominence: 0.05,
            histogram_bins: 60,
            density_points: 241,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("hsl_out"),
            formats: vec![Format::Csv],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Effective configuration with defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
