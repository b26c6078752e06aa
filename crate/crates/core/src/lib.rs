//! Spectral laboratory for conditional score-based diffusion models on
//! separable Hilbert spaces.
//!
//! Functions are represented by their coefficients in an orthonormal basis
//! shared by the prior covariance and the diffusion covariance. In that basis
//! the forward Ornstein–Uhlenbeck process, the observation model and the
//! reverse-time sampler all decouple mode by mode, which is what makes the
//! closed forms in [`gaussian_analytic`] possible.
//!
//! Module map:
//!
//! * [`spectral`]: covariance spectra, coefficient vectors, grid transforms.
//! * [`gaussian_analytic`]: exact Gaussian-prior posterior, score and bounds.
//! * [`sde`]: exact forward transitions and Euler–Maruyama reverse sampling.
//! * [`score_oracle`]: quadrature ground truth for separable non-Gaussian priors.
//! * [`dsm`]: denoising score matching targets, losses and linear fits.
//! * [`neural_op`]: a small Fourier neural operator with hand-written gradients.
//! * [`stats`]: empirical summaries shared by tests and the experiment runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dsm;
pub mod error;
pub mod gaussian_analytic;
pub mod neural_op;
pub mod rng;
pub mod score_oracle;
pub mod sde;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use gaussian_analytic::{ModeMoments, ObservationModel, ProblemSpec, ScoreCoeffs};
pub use spectral::{CovarianceSpectrum, DecayLaw, Grid, ModeVector};
