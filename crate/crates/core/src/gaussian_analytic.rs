//! Closed forms for the Gaussian prior `N(0, C_mu)` observed through a subset
//! of eigenmodes.
//!
//! With a shared eigenbasis and mode-selecting observations every quantity is
//! diagonal. Per mode `j` the two ratios
//!
//! * `p_j = lambda_j / mu_j` (diffusion vs prior variance),
//! * `q_j = mu_j / sigma_j^2` on observed modes, `0` elsewhere,
//!
//! determine the posterior, the conditional score `a_j(t) x + b_j(t) y` and
//! the reverse-SDE moment maps. A noiseless observation is stored as
//! `q_j = +inf` and routed through dedicated limit branches.
//!
//! Time-dependent factors are written in terms of `e^{-t}` and
//! `expm1(±t)` so that both `t -> 0` and large `t` stay accurate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure_len, ensure_positive_time, Error, Result};
use crate::spectral::{CovarianceSpectrum, ModeVector};

/// Observed eigenmodes with their noise standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    indices: Vec<usize>,
    noise_std: Vec<f64>,
}

impl ObservationModel {
    /// Same noise level `sigma_b` on every observed mode (`C_B = sigma_b^2 I`).
    pub fn isotropic(indices: Vec<usize>, sigma_b: f64) -> Result<Self> {
        let n = indices.len();
        Self::with_noise(indices, vec![sigma_b; n])
    }

    /// One noise standard deviation per observed mode (diagonal `C_B`).
    pub fn with_noise(indices: Vec<usize>, noise_std: Vec<f64>) -> Result<Self> {
        ensure_len(indices.len(), noise_std.len())?;
        let mut seen = indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "observed mode indices must be distinct".into(),
            ));
        }
        if let Some(s) = noise_std.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "noise std must be >= 0, got {s}"
            )));
        }
        Ok(Self { indices, noise_std })
    }

    pub fn none() -> Self {
        Self {
            indices: Vec::new(),
            noise_std: Vec::new(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    prior: CovarianceSpectrum,
    diffusion: CovarianceSpectrum,
    obs: ObservationModel,
    horizon: f64,
    p: Vec<f64>,
    q: Vec<f64>,
    noise: Vec<Option<f64>>,
}

impl ProblemSpec {
    pub fn new(
        prior: CovarianceSpectrum,
        diffusion: CovarianceSpectrum,
        obs: ObservationModel,
        horizon: f64,
    ) -> Result<Self> {
        let d = prior.len();
        ensure_len(d, diffusion.len())?;
        ensure_positive_time(horizon)?;
        let mut q = vec![0.0; d];
        let mut noise = vec![None; d];
        for (&m, &s) in obs.indices.iter().zip(&obs.noise_std) {
            if m >= d {
                return Err(Error::InvalidArgument(format!(
                    "observed mode {m} out of range for D = {d}"
                )));
            }
            q[m] = if s == 0.0 {
                f64::INFINITY
            } else {
                prior.get(m) / (s * s)
            };
            noise[m] = Some(s);
        }
        let p = prior
            .eigenvalues()
            .iter()
            .zip(diffusion.eigenvalues())
            .map(|(mu, lam)| lam / mu)
            .collect();
        Ok(Self {
            prior,
            diffusion,
            obs,
            horizon,
            p,
            q,
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior.len()
    }

    pub fn prior(&self) -> &CovarianceSpectrum {
        &self.prior
    }

    pub fn diffusion(&self) -> &CovarianceSpectrum {
        &self.diffusion
    }

    pub fn obs(&self) -> &ObservationModel {
        &self.obs
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(
            self.prior.clone(),
            self.diffusion.clone(),
            self.obs.clone(),
            horizon,
        )
    }

    /// Same spectra and horizon, nothing observed.
    pub fn unconditional(&self) -> Self {
        Self::new(
            self.prior.clone(),
            self.diffusion.clone(),
            ObservationModel::none(),
            self.horizon,
        )
        .expect("a valid spec stays valid without observations")
    }

    pub fn p(&self, m: usize) -> f64 {
        self.p[m]
    }

    /// `+inf` for noiseless observed modes.
    pub fn q(&self, m: usize) -> f64 {
        self.q[m]
    }

    pub fn is_observed(&self, m: usize) -> bool {
        self.noise[m].is_some()
    }

    /// Observation noise standard deviation of mode `m`, if observed.
    pub fn noise_std(&self, m: usize) -> Option<f64> {
        self.noise[m]
    }

    pub fn is_noiseless(&self, m: usize) -> bool {
        self.q[m].is_infinite()
    }

    pub fn any_noiseless(&self) -> bool {
        self.q.iter().any(|q| q.is_infinite())
    }

    /// `q/(1+q)`: weight of the data in the posterior mean.
    pub fn shrink(&self, m: usize) -> f64 {
        let q = self.q[m];
        if q.is_infinite() {
            1.0
        } else {
            q / (1.0 + q)
        }
    }

    /// `mu/(1+q)`: posterior variance of mode `m`.
    pub fn posterior_var(&self, m: usize) -> f64 {
        let q = self.q[m];
        if q.is_infinite() {
            0.0
        } else {
            self.prior.get(m) / (1.0 + q)
        }
    }

    /// `p(1+q)`, infinite for noiseless modes.
    fn rate(&self, m: usize) -> f64 {
        let q = self.q[m];
        if q.is_infinite() {
            f64::INFINITY
        } else {
            self.p[m] * (1.0 + q)
        }
    }
}

/// Per-mode linear score `S_j(t, x, y) = a_j x_j + b_j y_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCoeffs {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub t: f64,
}

impl ScoreCoeffs {
    pub fn apply(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.a[m] * x[m] + self.b[m] * y[m];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeMoments {
    pub mean: ModeVector,
    pub variance: Vec<f64>,
}

impl ModeMoments {
    /// Largest absolute deviation over means and variances.
    pub fn max_abs_diff(&self, other: &ModeMoments) -> f64 {
        self.mean
            .iter()
            .zip(other.mean.iter())
            .chain(self.variance.iter().zip(&other.variance))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean norm of the stacked mean and variance differences.
    pub fn l2_diff(&self, other: &ModeMoments) -> f64 {
        self.mean
            .iter()
            .zip(other.mean.iter())
            .chain(self.variance.iter().zip(&other.variance))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreNormVariant {
    /// The problem as specified.
    Conditional,
    /// All `q_j = 0`.
    Unconditional,
    /// Observed modes treated as noiselessly observed.
    Noiseless,
}

fn y_component(p: &ProblemSpec, y: &ModeVector, m: usize) -> f64 {
    // unobserved components of y are ignored by construction
    if p.is_observed(m) {
        y[m]
    } else {
        0.0
    }
}

pub fn posterior_moments(p: &ProblemSpec, y: &ModeVector) -> Result<ModeMoments> {
    ensure_len(p.dim(), y.len())?;
    let d = p.dim();
    let mean = (0..d)
        .map(|m| p.shrink(m) * y_component(p, y, m))
        .collect::<Vec<_>>();
    let variance = (0..d).map(|m| p.posterior_var(m)).collect();
    Ok(ModeMoments {
        mean: mean.into(),
        variance,
    })
}

/// Posterior of `x ~ N(0, diag(prior))` given `y = A x + noise`, noise `N(0, C_B)`.
///
/// Returns the mean `M_o y` and covariance `C_o` on the truncated space.
pub fn general_posterior(
    prior: &CovarianceSpectrum,
    a: &DMatrix<f64>,
    c_b: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(ModeVector, DMatrix<f64>)> {
    let d = prior.len();
    let n = a.nrows();
    ensure_len(d, a.ncols())?;
    ensure_len(n, y.len())?;
    if c_b.nrows() != n || c_b.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "C_B must be {n}x{n}, got {}x{}",
            c_b.nrows(),
            c_b.ncols()
        )));
    }
    let c_mu = DMatrix::from_diagonal(&DVector::from_column_slice(prior.eigenvalues()));
    let cross = &c_mu * a.transpose();
    let gram = a * &cross + c_b;
    let gram = (&gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(gram);
    let max = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let min = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v));
    if n > 0 && !(min > 1e-13 * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular(format!(
            "A C_mu A^T + C_B has eigenvalue range [{min:e}, {max:e}]"
        )));
    }
    let inv_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let gram_inv = &eig.eigenvectors * inv_vals * eig.eigenvectors.transpose();
    let gain = &cross * gram_inv;
    let mean = &gain * y;
    let cov = &c_mu - &gain * cross.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean.as_slice().to_vec().into(), cov))
}

/// Law of `X_t | Y = y`, per mode.
pub fn marginal_t_moments(p: &ProblemSpec, y: &ModeVector, t: f64) -> Result<ModeMoments> {
    ensure_len(p.dim(), y.len())?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("t must be >= 0, got {t}")));
    }
    let decay = (-0.5 * t).exp();
    let d = p.dim();
    let mean = (0..d)
        .map(|m| decay * p.shrink(m) * y_component(p, y, m))
        .collect::<Vec<_>>();
    let one_minus = -(-t).exp_m1();
    let variance = (0..d)
        .map(|m| decay * decay * p.posterior_var(m) + p.diffusion().get(m) * one_minus)
        .collect();
    Ok(ModeMoments {
        mean: mean.into(),
        variance,
    })
}

/// Reverse-drift coefficients `(mu_x, mu_y)` at forward time `t`, written in the
/// form of the projected reverse SDE `dZ = mu_x Z dt + mu_y y dt + sqrt(lambda) dW`.
pub fn drift_coeffs(p: &ProblemSpec, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_positive_time(t)?;
    let em1 = t.exp_m1();
    let et = t.exp();
    let d = p.dim();
    let mut mu_x = vec![0.0; d];
    let mut mu_y = vec![0.0; d];
    for m in 0..d {
        if p.is_noiseless(m) {
            mu_x[m] = 0.5 - et / em1;
            mu_y[m] = (0.5 * t).exp() / em1;
        } else {
            let (pj, qj) = (p.p(m), p.q(m));
            let den = 1.0 + em1 * pj * (1.0 + qj);
            mu_x[m] = 0.5 - et * pj * (1.0 + qj) / den;
            mu_y[m] = (0.5 * t).exp() * pj * qj / den;
        }
    }
    Ok((mu_x, mu_y))
}

/// Linear conditional score coefficients at forward time `t`.
pub fn score_coeffs(p: &ProblemSpec, t: f64) -> Result<ScoreCoeffs> {
    let d = p.dim();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    score_coeffs_into(p, t, &mut a, &mut b)?;
    Ok(ScoreCoeffs { a, b, t })
}

/// Allocation-free form of [`score_coeffs`].
pub fn score_coeffs_into(p: &ProblemSpec, t: f64, a: &mut [f64], b: &mut [f64]) -> Result<()> {
    ensure_positive_time(t)?;
    let e = (-t).exp();
    let one_minus = -(-t).exp_m1();
    let half = (-0.5 * t).exp();
    for m in 0..p.dim() {
        if p.is_noiseless(m) {
            a[m] = -1.0 / one_minus;
            b[m] = half / one_minus;
        } else {
            let r = p.rate(m);
            let den = e + r * one_minus;
            a[m] = -r / den;
            b[m] = half * p.p(m) * p.q(m) / den;
        }
    }
    Ok(())
}

/// `E[ ||S(t, X_t, y)||^2 | Y = y ]`.
pub fn score_norm_expected(p: &ProblemSpec, t: f64, variant: ScoreNormVariant) -> Result<f64> {
    ensure_positive_time(t)?;
    let e = (-t).exp();
    let one_minus = -(-t).exp_m1();
    let mut total = 0.0;
    for m in 0..p.dim() {
        let lam = p.diffusion().get(m);
        let mu = p.prior().get(m);
        let noiseless = match variant {
            ScoreNormVariant::Conditional => p.is_noiseless(m),
            ScoreNormVariant::Unconditional => false,
            ScoreNormVariant::Noiseless => p.is_observed(m),
        };
        if noiseless {
            total += lam / one_minus;
            continue;
        }
        let q = match variant {
            ScoreNormVariant::Unconditional => 0.0,
            _ => p.q(m),
        };
        let r = p.p(m) * (1.0 + q);
        total += (1.0 + q) * lam * lam / mu / (e + r * one_minus);
    }
    Ok(total)
}

/// Jensen bound `Tr(C) / (1 - e^{-t})`.
pub fn crude_bound(p: &ProblemSpec, t: f64) -> Result<f64> {
    ensure_positive_time(t)?;
    Ok(p.diffusion().trace() / -(-t).exp_m1())
}

/// Reverse-SDE moments at reverse time `T` (the problem horizon) from an
/// initial Gaussian `init` at reverse time 0.
pub fn reverse_moments(p: &ProblemSpec, y: &ModeVector, init: &ModeMoments) -> Result<ModeMoments> {
    let d = p.dim();
    ensure_len(d, y.len())?;
    ensure_len(d, init.mean.len())?;
    ensure_len(d, init.variance.len())?;
    let big_t = p.horizon();
    let em1 = big_t.exp_m1();
    let et = big_t.exp();
    let mut mean = vec![0.0; d];
    let mut variance = vec![0.0; d];
    for m in 0..d {
        let target_mean = p.shrink(m) * y_component(p, y, m);
        if p.is_noiseless(m) {
            mean[m] = target_mean;
            variance[m] = 0.0;
            continue;
        }
        let r = p.rate(m);
        let den = 1.0 + em1 * r;
        let pull = em1 * r / den;
        variance[m] = init.variance[m] * et / (den * den) + p.posterior_var(m) * pull;
        mean[m] = init.mean[m] * (0.5 * big_t).exp() / den + target_mean * pull;
    }
    Ok(ModeMoments {
        mean: mean.into(),
        variance,
    })
}

/// Law of `X_T | Y = y`: the reverse-SDE initialization that makes `Z_T`
/// exactly posterior-distributed.
pub fn exact_start_moments(p: &ProblemSpec, y: &ModeVector) -> Result<ModeMoments> {
    marginal_t_moments(p, y, p.horizon())
}

/// Uniform-in-time bound on the expected squared score norm for priors whose
/// per-mode density against the Gaussian posterior lies in `[1/K, K]` and is
/// `L`-Lipschitz.
pub fn prop3_bound(p: &ProblemSpec, k: f64, l: f64) -> Result<f64> {
    if p.any_noiseless() {
        return Err(Error::NotApplicable(
            "noiseless regime: p(1+q) is unbounded, no uniform score bound".into(),
        ));
    }
    if !(k >= 1.0) || !(l >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need K >= 1 and L >= 0, got K={k}, L={l}"
        )));
    }
    let big_t = p.horizon();
    let et = big_t.exp();
    let em1 = big_t.exp_m1();
    let lk2 = (l * k).powi(2);
    let k4 = k.powi(4);
    let sum: f64 = (0..p.dim())
        .map(|m| {
            let lam = p.diffusion().get(m);
            let r = p.rate(m);
            lam * et * (k4 * r + 2.0 * lam * et * lk2 * (1.0 + 3.0 * (r * em1).powi(4)))
        })
        .sum();
    Ok(2.0 * sum)
}
