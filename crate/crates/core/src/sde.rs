//! Forward Ornstein–Uhlenbeck diffusion and the conditional reverse SDE
//!
//! ```text
//! forward:  dX_t = -1/2 X_t dt + sqrt(C) dW_t
//! reverse:  dZ_s = 1/2 Z_s ds + S(T - s, Z_s, y) ds + sqrt(C) dW_s
//! ```
//!
//! in mode coordinates. The reverse equation is integrated with uniform
//! Euler–Maruyama steps on `[0, T - t_floor]`.

use rayon::prelude::*;

use crate::error::{ensure_len, Error, Result};
use crate::gaussian_analytic::{exact_start_moments, score_coeffs_into, ModeMoments, ProblemSpec};
use crate::rng::{substream, NormalStream};
use crate::spectral::ModeVector;

/// Default distance from the `t = 0` singularity at which reverse integration stops.
pub const DEFAULT_T_FLOOR: f64 = 1e-3;

/// A conditional score `S(t, x, y)` in mode coordinates.
///
/// Implementations must be callable concurrently from many threads.
pub trait ScoreFunction: Sync {
    /// Smallest forward time at which `eval` may be called.
    fn t_floor(&self) -> f64;

    fn eval(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]);
}

/// Exact Gaussian-prior score `a_j(t) x_j + b_j(t) y_j`.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    problem: ProblemSpec,
    t_floor: f64,
}

impl AnalyticScore {
    pub fn new(problem: ProblemSpec, t_floor: f64) -> Result<Self> {
        if !(t_floor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "t_floor must be > 0, got {t_floor}"
            )));
        }
        Ok(Self { problem, t_floor })
    }
}

impl ScoreFunction for AnalyticScore {
    fn t_floor(&self) -> f64 {
        self.t_floor
    }

    fn eval(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.problem.dim();
        let mut a = [0.0; 64];
        let mut b = [0.0; 64];
        if d <= 64 {
            score_coeffs_into(&self.problem, t, &mut a[..d], &mut b[..d])
                .expect("t >= t_floor > 0");
            for m in 0..d {
                out[m] = a[m] * x[m] + b[m] * y[m];
            }
        } else {
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            score_coeffs_into(&self.problem, t, &mut a, &mut b).expect("t >= t_floor > 0");
            for m in 0..d {
                out[m] = a[m] * x[m] + b[m] * y[m];
            }
        }
    }
}

/// A score that is identically zero.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore {
    pub t_floor: f64,
}

impl ScoreFunction for ZeroScore {
    fn t_floor(&self) -> f64 {
        self.t_floor
    }

    fn eval(&self, _t: f64, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    /// Reverse-time checkpoints, from 0 to `T - t_floor`.
    pub times: Vec<f64>,
    pub states: Vec<ModeVector>,
}

/// One exact draw of `X_t | X_0 = x0`.
pub fn forward_transition<R: NormalStream + ?Sized>(
    p: &ProblemSpec,
    x0: &ModeVector,
    t: f64,
    rng: &mut R,
) -> Result<ModeVector> {
    ensure_len(p.dim(), x0.len())?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("t must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    let decay = (-0.5 * t).exp();
    let one_minus = -(-t).exp_m1();
    Ok(x0
        .iter()
        .zip(p.diffusion().eigenvalues())
        .map(|(x, lam)| decay * x + (lam * one_minus).sqrt() * rng.standard_normal())
        .collect::<Vec<_>>()
        .into())
}

/// Euler–Maruyama integration of the reverse SDE from reverse time 0 to
/// `T - t_floor`.
pub fn reverse_integrate<S, R>(
    p: &ProblemSpec,
    score: &S,
    y: &ModeVector,
    z0: &ModeVector,
    steps: usize,
    rng: &mut R,
    record: bool,
) -> Result<(ModeVector, Option<SdePath>)>
where
    S: ScoreFunction + ?Sized,
    R: NormalStream + ?Sized,
{
    let d = p.dim();
    ensure_len(d, z0.len())?;
    ensure_len(d, y.len())?;
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let big_t = p.horizon();
    let t_floor = score.t_floor();
    if !(t_floor > 0.0 && t_floor < big_t) {
        return Err(Error::InvalidArgument(format!(
            "t_floor {t_floor} must lie in (0, T = {big_t})"
        )));
    }
    let span = big_t - t_floor;
    let h = span / steps as f64;
    let noise: Vec<f64> = p
        .diffusion()
        .eigenvalues()
        .iter()
        .map(|lam| (lam * h).sqrt())
        .collect();

    let mut z = z0.0.clone();
    let mut drift = vec![0.0; d];
    let mut path = record.then(|| SdePath {
        times: vec![0.0],
        states: vec![z0.clone()],
    });

    for k in 0..steps {
        let s = k as f64 * h;
        score.eval(big_t - s, &z, y, &mut drift);
        for m in 0..d {
            let next = z[m] + h * (0.5 * z[m] + drift[m]) + noise[m] * rng.standard_normal();
            if !next.is_finite() {
                return Err(Error::NonFinite {
                    step: k,
                    mode: m,
                    value: next,
                });
            }
            z[m] = next;
        }
        if let Some(path) = path.as_mut() {
            path.times.push(if k + 1 == steps {
                span
            } else {
                (k + 1) as f64 * h
            });
            path.states.push(z.clone().into());
        }
    }
    Ok((z.into(), path))
}

/// `n_paths` independent posterior samples; path `i` draws its exact-start
/// initial state and all its increments from substream `(seed, i)`.
pub fn ensemble_sample<S>(
    p: &ProblemSpec,
    score: &S,
    y: &ModeVector,
    n_paths: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<ModeVector>>
where
    S: ScoreFunction + ?Sized,
{
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    let start = exact_start_moments(p, y)?;
    let sd: Vec<f64> = start.variance.iter().map(|v| v.sqrt()).collect();
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let z0: ModeVector = start
                .mean
                .iter()
                .zip(&sd)
                .map(|(m, s)| m + s * rng.standard_normal())
                .collect::<Vec<_>>()
                .into();
            reverse_integrate(p, score, y, &z0, steps, &mut rng, false).map(|(z, _)| z)
        })
        .collect()
}

/// Per-mode sample mean and unbiased sample variance.
pub fn empirical_moments(samples: &[ModeVector]) -> Result<ModeMoments> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::LengthMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (acc, v) in mean.iter_mut().zip(s.iter()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.iter()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n - 1.0);
    Ok(ModeMoments {
        mean: mean.into(),
        variance: var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_analytic::{marginal_t_moments, ObservationModel};
    use crate::rng::ZeroNoise;
    use crate::spectral::{build_spectrum, CovarianceSpectrum, DecayLaw};
    use approx::assert_abs_diff_eq;

    fn problem(d: usize, sigma: f64, horizon: f64) -> ProblemSpec {
        let prior = build_spectrum(DecayLaw::Polynomial { alpha: 2.0 }, d).unwrap();
        ProblemSpec::new(
            prior.clone(),
            prior,
            ObservationModel::isotropic(vec![0, 1], sigma).unwrap(),
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn forward_identity_at_zero() {
        let p = problem(3, 0.5, 1.0);
        let x0 = ModeVector(vec![1.0, -2.0, 3.0]);
        assert_eq!(
            forward_transition(&p, &x0, 0.0, &mut substream(1, 0)).unwrap(),
            x0
        );
        assert!(forward_transition(&p, &x0, -1.0, &mut substream(1, 0)).is_err());
    }

    #[test]
    fn forward_moments() {
        let p = ProblemSpec::new(
            CovarianceSpectrum::new(vec![1.0, 0.5]).unwrap(),
            CovarianceSpectrum::new(vec![1.0, 0.3]).unwrap(),
            ObservationModel::none(),
            1.0,
        )
        .unwrap();
        let x0 = ModeVector(vec![2.0, 5.0]);
        let n = 100_000;
        let mut rng = substream(5, 0);
        let ln2 = std::f64::consts::LN_2;
        let near: Vec<ModeVector> = (0..n)
            .map(|_| forward_transition(&p, &x0, ln2, &mut rng).unwrap())
            .collect();
        let m = empirical_moments(&near).unwrap();
        let se = (0.5 / n as f64).sqrt();
        assert!((m.mean[0] - 2f64.sqrt()).abs() < 3.0 * se);
        assert!((m.variance[0] - 0.5).abs() < 3.0 * 0.5 * (2.0 / n as f64).sqrt());

        let far: Vec<ModeVector> = (0..n)
            .map(|_| forward_transition(&p, &x0, 40.0, &mut rng).unwrap())
            .collect();
        let m = empirical_moments(&far).unwrap();
        for (v, lam) in m.variance.iter().zip([1.0, 0.3]) {
            assert!(
                (v - lam).abs() < 3.0 * lam * (2.0 / n as f64).sqrt(),
                "{v} vs {lam}"
            );
        }
    }

    #[test]
    fn deterministic_growth_without_score_or_noise() {
        let p = ProblemSpec::new(
            CovarianceSpectrum::new(vec![1.0]).unwrap(),
            CovarianceSpectrum::new(vec![1e-300]).unwrap(),
            ObservationModel::none(),
            1.0,
        )
        .unwrap();
        let score = ZeroScore { t_floor: 1e-3 };
        let want = 1.5 * (0.5f64 * (1.0 - 1e-3)).exp();
        let mut prev_err = f64::INFINITY;
        for steps in [100, 1000, 10_000] {
            let (z, _) = reverse_integrate(
                &p,
                &score,
                &ModeVector(vec![0.0]),
                &ModeVector(vec![1.5]),
                steps,
                &mut ZeroNoise,
                false,
            )
            .unwrap();
            let err = (z[0] - want).abs();
            assert!(err < prev_err);
            prev_err = err;
        }
        assert!(prev_err < 1e-4);
    }

    #[test]
    fn recorded_path_shape() {
        let p = problem(3, 0.5, 1.0);
        let score = AnalyticScore::new(p.clone(), 1e-3).unwrap();
        let (z, path) = reverse_integrate(
            &p,
            &score,
            &ModeVector(vec![0.2, 0.1, 0.0]),
            &ModeVector::zeros(3),
            10,
            &mut substream(3, 0),
            true,
        )
        .unwrap();
        let path = path.unwrap();
        assert_eq!(path.times.len(), 11);
        assert_eq!(path.states.len(), 11);
        assert_eq!(path.times[0], 0.0);
        assert_abs_diff_eq!(*path.times.last().unwrap(), 1.0 - 1e-3, epsilon = 1e-15);
        assert_eq!(path.states.last().unwrap(), &z);
    }

    #[test]
    fn overflow_is_reported() {
        struct Explode;
        impl ScoreFunction for Explode {
            fn t_floor(&self) -> f64 {
                1e-3
            }
            fn eval(&self, _: f64, x: &[f64], _: &[f64], out: &mut [f64]) {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v * 1e200;
                }
            }
        }
        let p = problem(2, 0.5, 1.0);
        let err = reverse_integrate(
            &p,
            &Explode,
            &ModeVector::zeros(2),
            &ModeVector(vec![1.0, 1.0]),
            50,
            &mut ZeroNoise,
            false,
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                Error::NonFinite {
                    step: 1,
                    mode: 0,
                    ..
                }
            ),
            "{err:?}"
        );
    }

    #[test]
    fn euler_mean_has_weak_order_one() {
        // With zero noise the scheme reproduces its own mean recursion exactly.
        let p = problem(4, 0.4, 2.0);
        let y = ModeVector(vec![0.9, -0.6, 0.0, 0.0]);
        let t_floor = 1e-3;
        let score = AnalyticScore::new(p.clone(), t_floor).unwrap();
        let start = exact_start_moments(&p, &y).unwrap();
        let target = marginal_t_moments(&p, &y, t_floor).unwrap();
        let mut log_h = Vec::new();
        let mut log_err = Vec::new();
        for steps in [250usize, 500, 1000, 2000] {
            let (z, _) =
                reverse_integrate(&p, &score, &y, &start.mean, steps, &mut ZeroNoise, false)
                    .unwrap();
            let err: f64 = z
                .iter()
                .zip(target.mean.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            log_h.push(((2.0 - t_floor) / steps as f64).ln());
            log_err.push(err.ln());
        }
        let slope = crate::stats::ols_slope(&log_h, &log_err);
        assert!((slope - 1.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn ensemble_is_seed_deterministic() {
        let p = problem(3, 0.5, 1.0);
        let score = AnalyticScore::new(p.clone(), 1e-3).unwrap();
        let y = ModeVector(vec![0.3, 0.1, 0.0]);
        let a = ensemble_sample(&p, &score, &y, 1, 50, 9).unwrap();
        let b = ensemble_sample(&p, &score, &y, 1, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = ensemble_sample(&p, &score, &y, 1, 50, 10).unwrap();
        assert_ne!(a, c);
        assert!(ensemble_sample(&p, &score, &y, 0, 50, 9).is_err());
    }

    #[test]
    fn ensemble_is_thread_count_independent() {
        let p = problem(3, 0.5, 1.0);
        let score = AnalyticScore::new(p.clone(), 1e-3).unwrap();
        let y = ModeVector(vec![0.3, 0.1, 0.0]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| ensemble_sample(&p, &score, &y, 64, 40, 2).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn unconditional_ensemble_recovers_prior() {
        let p = problem(3, 0.5, 1.0).unconditional();
        let score = AnalyticScore::new(p.clone(), 1e-3).unwrap();
        let n = 20_000;
        let samples = ensemble_sample(&p, &score, &ModeVector::zeros(3), n, 200, 4).unwrap();
        let m = empirical_moments(&samples).unwrap();
        for j in 0..3 {
            let mu = p.prior().get(j);
            assert!(m.mean[j].abs() < 4.0 * (mu / n as f64).sqrt());
            assert!(
                (m.variance[j] / mu - 1.0).abs() < 0.05,
                "mode {j}: {} vs {mu}",
                m.variance[j]
            );
        }
    }

    #[test]
    fn empirical_moment_examples() {
        let v = ModeVector(vec![1.0, -2.0]);
        let m = empirical_moments(&[v.clone(), v.clone()]).unwrap();
        assert_eq!(m.mean, v);
        assert_eq!(m.variance, vec![0.0, 0.0]);
        let m = empirical_moments(&[ModeVector(vec![1.5]), ModeVector(vec![-1.5])]).unwrap();
        assert_eq!(m.mean[0], 0.0);
        assert_abs_diff_eq!(m.variance[0], 2.0 * 1.5 * 1.5, epsilon = 1e-15);
        assert!(empirical_moments(&[v]).is_err());
    }
}
