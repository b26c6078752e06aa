//! Quadrature ground truth for separable non-Gaussian priors.
//!
//! The prior class is the Gaussian posterior of each mode re-weighted by a
//! positive factor `psi_j(x0, y_j)`. The conditional mean
//! `E[X_0^j | X_t^j = x, Y = y]` is then a ratio of one-dimensional integrals
//! against
//!
//! ```text
//! w(x0) = phi(x - e^{-t/2} x0; lambda_j (1 - e^{-t}))
//!       * phi(x0 - x_y; mu_j / (1 + q_j))
//!       * psi_j(x0, y_j)
//! ```
//!
//! evaluated with the trapezoidal rule in log space on a uniform node set
//! centred on the `psi = 1` conditional mean.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{ensure_len, ensure_positive_time, Error, Result};
use crate::gaussian_analytic::{marginal_t_moments, score_coeffs, ProblemSpec};
use crate::rng::{substream, NormalStream};
use crate::spectral::ModeVector;

/// `log psi_j(x0, y_j)` for mode `j`.
pub trait ModeWeight: Send + Sync {
    fn log_psi(&self, mode: usize, x0: f64, y: f64) -> f64;
}

impl<F> ModeWeight for F
where
    F: Fn(usize, f64, f64) -> f64 + Send + Sync,
{
    fn log_psi(&self, mode: usize, x0: f64, y: f64) -> f64 {
        self(mode, x0, y)
    }
}

/// `psi = 1`: the Gaussian prior itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitWeight;

impl ModeWeight for UnitWeight {
    fn log_psi(&self, _mode: usize, _x0: f64, _y: f64) -> f64 {
        0.0
    }
}

/// `psi_j(x, y) = exp(c sin(w x + 0.3 y + j))` with `c = ln K` and `w` chosen
/// so that the Lipschitz constant is exactly `L`.
#[derive(Debug, Clone, Copy)]
pub struct SinusoidalWeight {
    amplitude: f64,
    frequency: f64,
}

impl SinusoidalWeight {
    pub fn new(k: f64, l: f64) -> Result<Self> {
        if !(k > 1.0) || !(l > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sinusoidal weight needs K > 1 and L > 0, got K={k}, L={l}"
            )));
        }
        let amplitude = k.ln();
        // sup |d psi / dx| = c w e^c = c w K
        Ok(Self {
            amplitude,
            frequency: l / (amplitude * k),
        })
    }
}

impl ModeWeight for SinusoidalWeight {
    fn log_psi(&self, mode: usize, x0: f64, y: f64) -> f64 {
        self.amplitude * (self.frequency * x0 + 0.3 * y + mode as f64).sin()
    }
}

/// One-dimensional Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    /// `(weight, mean, variance)`, weights summing to one.
    pub components: Vec<(f64, f64, f64)>,
}

impl GaussianMixture {
    pub fn new(components: Vec<(f64, f64, f64)>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.0).sum();
        if components.is_empty()
            || components.iter().any(|c| !(c.0 > 0.0) || !(c.2 > 0.0))
            || (total - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidArgument(
                "mixture needs positive weights summing to 1 and positive variances".into(),
            ));
        }
        Ok(Self { components })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|&(w, m, v)| w.ln() + log_normal_pdf(x - m, v))
            .collect();
        log_sum_exp(&terms)
    }

    /// Closed-form `E[X_0 | X_t = x]` when `X_0` follows this mixture and
    /// `X_t = e^{-t/2} X_0 + N(0, lambda (1 - e^{-t}))`.
    pub fn conditional_mean(&self, t: f64, lambda: f64, x: f64) -> f64 {
        let decay = (-0.5 * t).exp();
        let lam_t = lambda * -(-t).exp_m1();
        let mut log_resp = Vec::with_capacity(self.components.len());
        let mut means = Vec::with_capacity(self.components.len());
        for &(w, m, v) in &self.components {
            let marg_var = decay * decay * v + lam_t;
            log_resp.push(w.ln() + log_normal_pdf(x - decay * m, marg_var));
            means.push(m + v * decay / marg_var * (x - decay * m));
        }
        let norm = log_sum_exp(&log_resp);
        log_resp
            .iter()
            .zip(&means)
            .map(|(lr, m)| (lr - norm).exp() * m)
            .sum()
    }
}

/// Re-weights every mode's Gaussian posterior into a given mixture.
///
/// The resulting conditional law of `X_0^j` is the mixture itself, whatever
/// the observation, which gives a closed-form reference for the quadrature.
pub struct MixtureWeight {
    mixture: GaussianMixture,
    shrink: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl MixtureWeight {
    pub fn new(p: &ProblemSpec, mixture: GaussianMixture) -> Result<Self> {
        if p.any_noiseless() {
            return Err(Error::NotApplicable(
                "mixture weight needs a noisy observation model".into(),
            ));
        }
        let d = p.dim();
        Ok(Self {
            mixture,
            shrink: (0..d)
                .map(|m| if p.is_observed(m) { p.shrink(m) } else { 0.0 })
                .collect(),
            posterior_var: (0..d).map(|m| p.posterior_var(m)).collect(),
        })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl ModeWeight for MixtureWeight {
    fn log_psi(&self, mode: usize, x0: f64, y: f64) -> f64 {
        let centre = self.shrink[mode] * y;
        self.mixture.log_density(x0) - log_normal_pdf(x0 - centre, self.posterior_var[mode])
    }
}

/// A separable prior declared to satisfy `1/K <= psi <= K` and
/// `|psi(x) - psi(x')| <= L |x - x'|`.
#[derive(Clone)]
pub struct SeparablePrior {
    weight: Arc<dyn ModeWeight>,
    k: f64,
    l: f64,
}

impl std::fmt::Debug for SeparablePrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeparablePrior")
            .field("k", &self.k)
            .field("l", &self.l)
            .finish_non_exhaustive()
    }
}

impl SeparablePrior {
    pub fn new(weight: Arc<dyn ModeWeight>, k: f64, l: f64) -> Result<Self> {
        if !(k >= 1.0) || !(l >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need K >= 1 and L >= 0, got K={k}, L={l}"
            )));
        }
        Ok(Self { weight, k, l })
    }

    pub fn gaussian() -> Self {
        Self {
            weight: Arc::new(UnitWeight),
            k: 1.0,
            l: 0.0,
        }
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    #[inline]
    pub fn log_psi(&self, mode: usize, x0: f64, y: f64) -> f64 {
        self.weight.log_psi(mode, x0, y)
    }

    /// Checks the declared `K` and `L` on a lattice: bounds at every point,
    /// Lipschitz on neighbouring `x` pairs.
    pub fn spot_check(&self, d: usize, xs: &[f64], ys: &[f64]) -> Result<()> {
        let slack = 1e-12;
        for m in 0..d {
            for &y in ys {
                let mut prev: Option<(f64, f64)> = None;
                for &x in xs {
                    let psi = self.log_psi(m, x, y).exp();
                    if psi < 1.0 / self.k - slack || psi > self.k + slack {
                        return Err(Error::InvalidArgument(format!(
                            "psi_{m}({x}, {y}) = {psi} outside [1/K, K] for K = {}",
                            self.k
                        )));
                    }
                    if let Some((px, ppsi)) = prev {
                        if (psi - ppsi).abs() > self.l * (x - px).abs() + slack {
                            return Err(Error::InvalidArgument(format!(
                                "psi_{m} violates L = {} between x = {px} and x = {x}",
                                self.l
                            )));
                        }
                    }
                    prev = Some((x, psi));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    n_nodes: usize,
    half_width: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            n_nodes: 801,
            half_width: 10.0,
        }
    }
}

impl QuadratureSpec {
    pub fn new(n_nodes: usize, half_width: f64) -> Result<Self> {
        if n_nodes < 51 || n_nodes.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "n_nodes must be odd and >= 51, got {n_nodes}"
            )));
        }
        if !(half_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "half_width must be > 0, got {half_width}"
            )));
        }
        Ok(Self {
            n_nodes,
            half_width,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }
}

/// `E[X_0^j | X_t^j = x, Y = y]` by quadrature.
pub fn oracle_conditional_mean(
    p: &ProblemSpec,
    prior: &SeparablePrior,
    mode: usize,
    t: f64,
    x: f64,
    y_j: f64,
    quad: &QuadratureSpec,
) -> Result<f64> {
    ensure_positive_time(t)?;
    if mode >= p.dim() {
        return Err(Error::InvalidArgument(format!("mode {mode} out of range")));
    }
    let centre_y = if p.is_observed(mode) {
        p.shrink(mode) * y_j
    } else {
        0.0
    };
    let post_var = p.posterior_var(mode);
    if post_var == 0.0 {
        // noiselessly observed: X_0^j is pinned to the data
        return Ok(centre_y);
    }
    let decay = (-0.5 * t).exp();
    let lam_t = p.diffusion().get(mode) * -(-t).exp_m1();

    // psi = 1 conditional law sets the node window
    let var = 1.0 / (1.0 / post_var + decay * decay / lam_t);
    let centre = var * (centre_y / post_var + decay * x / lam_t);
    let half = quad.half_width * var.sqrt();
    let n = quad.n_nodes;
    let step = 2.0 * half / (n - 1) as f64;

    let mut log_w = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = centre - half + step * i as f64;
        let r = x - decay * x0;
        let u = x0 - centre_y;
        let mut lw = -0.5 * r * r / lam_t - 0.5 * u * u / post_var + prior.log_psi(mode, x0, y_j);
        if i == 0 || i == n - 1 {
            lw -= std::f64::consts::LN_2;
        }
        log_w.push(lw);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateQuadrature { nodes: 0 });
    }
    let mut mass = 0.0;
    let mut moment = 0.0;
    let mut supported = 0usize;
    for (i, lw) in log_w.iter().enumerate() {
        let w = (lw - max).exp();
        if w >= 1e-3 {
            supported += 1;
        }
        mass += w;
        moment += w * (step * i as f64 - half);
    }
    if supported < 5 {
        return Err(Error::DegenerateQuadrature { nodes: supported });
    }
    Ok(centre + moment / mass)
}

/// Conditional score of mode `j` from the quadrature conditional mean.
pub fn oracle_score(
    p: &ProblemSpec,
    prior: &SeparablePrior,
    mode: usize,
    t: f64,
    x: f64,
    y_j: f64,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let mean = oracle_conditional_mean(p, prior, mode, t, x, y_j, quad)?;
    Ok(-(x - (-0.5 * t).exp() * mean) / -(-t).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Smallest per-mode effective sample size.
    pub min_ess: f64,
}

/// Monte Carlo estimate of `E[ ||S(t, X_t, y)||^2 | Y = y ]`.
///
/// Modes are independent under a separable prior, so each mode is estimated
/// on its own: draws from the `psi = 1` posterior are pushed through the exact
/// forward transition and self-normalized with weights `psi_j(x0, y_j)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_score_norm<R: NormalStream + ?Sized>(
    p: &ProblemSpec,
    prior: &SeparablePrior,
    y: &ModeVector,
    t: f64,
    n_samples: usize,
    quad: &QuadratureSpec,
    rng: &mut R,
) -> Result<McEstimate> {
    ensure_positive_time(t)?;
    ensure_len(p.dim(), y.len())?;
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1000 samples, got {n_samples}"
        )));
    }
    let decay = (-0.5 * t).exp();
    let one_minus = -(-t).exp_m1();
    let mut value = 0.0;
    let mut var = 0.0;
    let mut min_ess = f64::INFINITY;
    let mut log_w = vec![0.0; n_samples];
    let mut s2 = vec![0.0; n_samples];
    for m in 0..p.dim() {
        let centre_y = if p.is_observed(m) {
            p.shrink(m) * y[m]
        } else {
            0.0
        };
        let post_sd = p.posterior_var(m).sqrt();
        let noise_sd = (p.diffusion().get(m) * one_minus).sqrt();
        for i in 0..n_samples {
            let x0 = centre_y + post_sd * rng.standard_normal();
            let xt = decay * x0 + noise_sd * rng.standard_normal();
            log_w[i] = prior.log_psi(m, x0, y[m]);
            s2[i] = oracle_score(p, prior, m, t, xt, y[m], quad)?.powi(2);
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
        let sw: f64 = w.iter().sum();
        let sw2: f64 = w.iter().map(|v| v * v).sum();
        let est = w.iter().zip(&s2).map(|(w, s)| w * s).sum::<f64>() / sw;
        let v = w
            .iter()
            .zip(&s2)
            .map(|(w, s)| (w * (s - est)).powi(2))
            .sum::<f64>()
            / (sw * sw);
        let ess = sw * sw / sw2;
        min_ess = min_ess.min(ess);
        value += est;
        var += v;
    }
    let floor = n_samples as f64 / 100.0;
    if min_ess < floor {
        return Err(Error::Unreliable {
            ess: min_ess,
            floor,
        });
    }
    Ok(McEstimate {
        value,
        stderr: var.sqrt(),
        min_ess,
    })
}

const MC_CHUNK: usize = 4096;

/// Monte Carlo estimate of `E[ ||S(t, X_t, y)||^2 | Y = y ]` for the Gaussian
/// prior, drawing `X_t | Y = y` exactly and evaluating the analytic score.
/// Chunk `c` of 4096 draws uses substream `(seed, c)`.
pub fn mc_gaussian_score_norm(
    p: &ProblemSpec,
    y: &ModeVector,
    t: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    ensure_positive_time(t)?;
    ensure_len(p.dim(), y.len())?;
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    let coeffs = score_coeffs(p, t)?;
    let law = marginal_t_moments(p, y, t)?;
    let sd: Vec<f64> = law.variance.iter().map(|v| v.sqrt()).collect();
    let d = p.dim();
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let partial: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, c as u64);
            let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut x = vec![0.0; d];
            let mut s = vec![0.0; d];
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..len {
                for m in 0..d {
                    x[m] = law.mean[m] + sd[m] * rng.standard_normal();
                }
                coeffs.apply(&x, y, &mut s);
                let v: f64 = s.iter().map(|u| u * u).sum();
                sum += v;
                sum_sq += v * v;
            }
            (sum, sum_sq)
        })
        .collect();
    let (sum, sum_sq) = partial
        .iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
        min_ess: n,
    })
}

fn log_normal_pdf(r: f64, var: f64) -> f64 {
    -0.5 * (r * r / var + (2.0 * std::f64::consts::PI * var).ln())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
