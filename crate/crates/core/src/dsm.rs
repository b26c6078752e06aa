//! Conditional denoising score matching in mode coordinates.
//!
//! For a triple `(x0, x_t, y)` the regression target is
//!
//! ```text
//! -(x_t - e^{-t/2} x0) / (1 - e^{-t})
//! ```
//!
//! whose conditional expectation given `(x_t, y)` is the conditional score.
//! With a Gaussian prior the score is linear in `(x_t, y)` per mode, so a
//! per-mode least-squares fit on short time bins recovers it.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{ensure_len, ensure_positive_time, Error, Result};
use crate::gaussian_analytic::ProblemSpec;
use crate::rng::{substream, NormalStream, StreamRng};
use crate::sde::{forward_transition, ScoreFunction};
use crate::spectral::{sample_gaussian, ModeVector};

/// Samples per accumulation chunk; partial sums are merged in chunk order so
/// results do not depend on the thread count.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct DsmSample {
    pub t: f64,
    pub x0: ModeVector,
    pub xt: ModeVector,
    pub y: ModeVector,
}

pub fn dsm_target(x0: &ModeVector, xt: &ModeVector, t: f64) -> Result<ModeVector> {
    ensure_positive_time(t)?;
    ensure_len(x0.len(), xt.len())?;
    let mut out = vec![0.0; x0.len()];
    target_into(x0, xt, t, &mut out);
    Ok(out.into())
}

fn target_into(x0: &[f64], xt: &[f64], t: f64, out: &mut [f64]) {
    let decay = (-0.5 * t).exp();
    let scale = 1.0 / -(-t).exp_m1();
    for ((o, a), b) in out.iter_mut().zip(x0).zip(xt) {
        *o = -scale * (b - decay * a);
    }
}

/// Noisy observation of `x0`: observed modes plus their noise, zero elsewhere.
pub fn observe<R: NormalStream + ?Sized>(
    p: &ProblemSpec,
    x0: &ModeVector,
    rng: &mut R,
) -> Result<ModeVector> {
    ensure_len(p.dim(), x0.len())?;
    let mut y = vec![0.0; p.dim()];
    for m in 0..p.dim() {
        if let Some(sd) = p.noise_std(m) {
            y[m] = x0[m] + sd * rng.standard_normal();
        }
    }
    Ok(y.into())
}

/// `(x0, y)` drawn from the Gaussian prior `N(0, diag(mu))` and the observation model.
pub fn gaussian_pair_sampler(
    p: &ProblemSpec,
) -> impl Fn(&mut StreamRng) -> (ModeVector, ModeVector) + Sync + '_ {
    move |rng| {
        let x0 = sample_gaussian(p.prior(), &ModeVector::zeros(p.dim()), rng).expect("dims agree");
        let y = observe(p, &x0, rng).expect("dims agree");
        (x0, y)
    }
}

/// Draws `n` i.i.d. training triples with `t ~ U[t_floor, T]`.
///
/// Sample `i` uses substream `i` of `seed` for everything, so the dataset does
/// not depend on how the work is scheduled.
pub fn make_dsm_dataset<F>(
    p: &ProblemSpec,
    prior_sampler: &F,
    n: usize,
    t_floor: f64,
    seed: u64,
) -> Result<Vec<DsmSample>>
where
    F: Fn(&mut StreamRng) -> (ModeVector, ModeVector) + Sync,
{
    let big_t = p.horizon();
    if !(t_floor > 0.0 && t_floor < big_t) {
        return Err(Error::InvalidArgument(format!(
            "t_floor must lie in (0, {big_t}), got {t_floor}"
        )));
    }
    generate(p, prior_sampler, n, seed, |rng| {
        t_floor + (big_t - t_floor) * rng.random::<f64>()
    })
}

/// As [`make_dsm_dataset`] with every sample at the same time `t`.
pub fn make_dsm_dataset_at<F>(
    p: &ProblemSpec,
    prior_sampler: &F,
    n: usize,
    t: f64,
    seed: u64,
) -> Result<Vec<DsmSample>>
where
    F: Fn(&mut StreamRng) -> (ModeVector, ModeVector) + Sync,
{
    ensure_positive_time(t)?;
    generate(p, prior_sampler, n, seed, |_| t)
}

fn generate<F, G>(
    p: &ProblemSpec,
    prior_sampler: &F,
    n: usize,
    seed: u64,
    draw_t: G,
) -> Result<Vec<DsmSample>>
where
    F: Fn(&mut StreamRng) -> (ModeVector, ModeVector) + Sync,
    G: Fn(&mut StreamRng) -> f64 + Sync,
{
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i);
            let t = draw_t(&mut rng);
            let (x0, y) = prior_sampler(&mut rng);
            ensure_len(p.dim(), x0.len())?;
            ensure_len(p.dim(), y.len())?;
            let xt = forward_transition(p, &x0, t, &mut rng)?;
            Ok(DsmSample { t, x0, xt, y })
        })
        .collect()
}

/// One row per sample and mode: `t,mode,x0,xt,y`.
pub fn write_dataset_csv<W: Write>(dataset: &[DsmSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "mode", "x0", "xt", "y"])?;
    for s in dataset {
        for m in 0..s.x0.len() {
            w.write_record([
                format!("{:.16e}", s.t),
                m.to_string(),
                format!("{:.16e}", s.x0[m]),
                format!("{:.16e}", s.xt[m]),
                format!("{:.16e}", s.y[m]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Least-squares coefficients of one mode on one time bin, with
/// heteroskedasticity-robust standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub a: f64,
    pub b: f64,
    pub a_se: f64,
    pub b_se: f64,
    pub n: usize,
}

/// Moment sums over the samples of one bin.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    xx: f64,
    xy: f64,
    yy: f64,
    xz: f64,
    yz: f64,
}

impl Moments {
    fn merge(mut self, o: Moments) -> Moments {
        self.n += o.n;
        self.xx += o.xx;
        self.xy += o.xy;
        self.yy += o.yy;
        self.xz += o.xz;
        self.yz += o.yz;
        self
    }
}

fn in_bin(t: f64, (lo, hi): (f64, f64), closed_right: bool) -> bool {
    t >= lo && (t < hi || (closed_right && t == hi))
}

/// Per-chunk partial sums folded left to right.
fn chunked_sum<T, F>(dataset: &[DsmSample], f: F) -> T
where
    T: Default + Send + Copy,
    F: Fn(&DsmSample) -> Option<T> + Sync,
    T: std::ops::Add<Output = T>,
{
    dataset
        .par_chunks(CHUNK)
        .map(|c| c.iter().filter_map(&f).fold(T::default(), |acc, v| acc + v))
        .collect::<Vec<_>>()
        .into_iter()
        .fold(T::default(), |acc, v| acc + v)
}

impl std::ops::Add for Moments {
    type Output = Moments;
    fn add(self, o: Moments) -> Moments {
        self.merge(o)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Meat {
    xx: f64,
    xy: f64,
    yy: f64,
}

impl std::ops::Add for Meat {
    type Output = Meat;
    fn add(self, o: Meat) -> Meat {
        Meat {
            xx: self.xx + o.xx,
            xy: self.xy + o.xy,
            yy: self.yy + o.yy,
        }
    }
}

fn fit_bin(
    dataset: &[DsmSample],
    mode: usize,
    bin: (f64, f64),
    closed_right: bool,
) -> Result<LinearFit> {
    let mom: Moments = chunked_sum(dataset, |s| {
        if !in_bin(s.t, bin, closed_right) {
            return None;
        }
        let x = s.xt[mode];
        let y = s.y[mode];
        let z = target_component(s, mode);
        Some(Moments {
            n: 1,
            xx: x * x,
            xy: x * y,
            yy: y * y,
            xz: x * z,
            yz: y * z,
        })
    });
    if mom.n < 100 {
        return Err(Error::InvalidArgument(format!(
            "bin [{}, {}] holds {} samples, need at least 100",
            bin.0, bin.1, mom.n
        )));
    }
    if mom.xx <= 0.0 {
        return Err(Error::Singular(format!(
            "mode {mode}: x_t is identically zero in the bin"
        )));
    }
    // y carrying no signal pins b to 0
    let y_free = mom.yy > 0.0;
    let (a, b, inv) = if y_free {
        let det = mom.xx * mom.yy - mom.xy * mom.xy;
        if det <= 1e-12 * mom.xx * mom.yy {
            return Err(Error::Singular(format!(
                "mode {mode}: collinear regressors"
            )));
        }
        let inv = [mom.yy / det, -mom.xy / det, mom.xx / det];
        (
            inv[0] * mom.xz + inv[1] * mom.yz,
            inv[1] * mom.xz + inv[2] * mom.yz,
            inv,
        )
    } else {
        (mom.xz / mom.xx, 0.0, [1.0 / mom.xx, 0.0, 0.0])
    };
    let meat: Meat = chunked_sum(dataset, |s| {
        if !in_bin(s.t, bin, closed_right) {
            return None;
        }
        let x = s.xt[mode];
        let y = if y_free { s.y[mode] } else { 0.0 };
        let e = target_component(s, mode) - a * x - b * y;
        let e2 = e * e;
        Some(Meat {
            xx: e2 * x * x,
            xy: e2 * x * y,
            yy: e2 * y * y,
        })
    });
    // (X'X)^-1 M (X'X)^-1 for symmetric 2x2 matrices [p q; q r]
    let (p, q, r) = (inv[0], inv[1], inv[2]);
    let var_a = p * p * meat.xx + 2.0 * p * q * meat.xy + q * q * meat.yy;
    let var_b = q * q * meat.xx + 2.0 * q * r * meat.xy + r * r * meat.yy;
    Ok(LinearFit {
        a,
        b,
        a_se: var_a.max(0.0).sqrt(),
        b_se: var_b.max(0.0).sqrt(),
        n: mom.n,
    })
}

fn target_component(s: &DsmSample, mode: usize) -> f64 {
    let decay = (-0.5 * s.t).exp();
    -(s.xt[mode] - decay * s.x0[mode]) / -(-s.t).exp_m1()
}

/// Regresses the mode-`mode` target on `(x_t, y)` over samples with
/// `t` in `[t1, t2]`.
pub fn fit_linear_score(dataset: &[DsmSample], mode: usize, bin: (f64, f64)) -> Result<LinearFit> {
    if !(bin.0 < bin.1) {
        return Err(Error::InvalidArgument(format!(
            "empty bin [{}, {}]",
            bin.0, bin.1
        )));
    }
    if dataset.first().is_some_and(|s| mode >= s.x0.len()) {
        return Err(Error::InvalidArgument(format!("mode {mode} out of range")));
    }
    fit_bin(dataset, mode, bin, true)
}

/// Piecewise-constant-in-time linear score `a_{jk} x_j + b_{jk} y_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScoreModel {
    edges: Vec<f64>,
    /// `fits[k][j]` for bin `k` and mode `j`.
    fits: Vec<Vec<LinearFit>>,
}

impl LinearScoreModel {
    /// Fits every mode on `n_bins` uniform bins partitioning `[t_floor, t_max]`.
    pub fn fit(dataset: &[DsmSample], t_floor: f64, t_max: f64, n_bins: usize) -> Result<Self> {
        if n_bins == 0 || !(t_floor > 0.0 && t_floor < t_max) {
            return Err(Error::InvalidArgument(format!(
                "need n_bins >= 1 and 0 < t_floor < t_max, got {n_bins}, {t_floor}, {t_max}"
            )));
        }
        let d = dataset
            .first()
            .map(|s| s.x0.len())
            .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let width = (t_max - t_floor) / n_bins as f64;
        let mut edges: Vec<f64> = (0..=n_bins).map(|k| t_floor + width * k as f64).collect();
        edges[n_bins] = t_max;
        let fits = (0..n_bins)
            .map(|k| {
                let last = k + 1 == n_bins;
                (0..d)
                    .map(|j| fit_bin(dataset, j, (edges[k], edges[k + 1]), last))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { edges, fits })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_bins(&self) -> usize {
        self.fits.len()
    }

    pub fn fit_at(&self, bin: usize, mode: usize) -> &LinearFit {
        &self.fits[bin][mode]
    }

    pub fn bin_midpoint(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }

    /// Bin containing `t`, clamped to the first or last bin outside the range.
    pub fn bin_of(&self, t: f64) -> usize {
        let k = self.edges.partition_point(|&e| e <= t);
        k.clamp(1, self.fits.len()) - 1
    }

    /// Copy with every `a` multiplied by `factor`.
    pub fn scaled_a(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.fits.iter_mut().flatten().for_each(|f| f.a *= factor);
        out
    }
}

impl ScoreFunction for LinearScoreModel {
    fn t_floor(&self) -> f64 {
        self.edges[0]
    }

    fn eval(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        let fits = &self.fits[self.bin_of(t)];
        for (m, f) in fits.iter().enumerate() {
            out[m] = f.a * x[m] + f.b * y[m];
        }
    }
}

/// Mean and standard error of the batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    s: f64,
    s2: f64,
}

impl std::ops::Add for Sums {
    type Output = Sums;
    fn add(self, o: Sums) -> Sums {
        Sums {
            s: self.s + o.s,
            s2: self.s2 + o.s2,
        }
    }
}

/// Mean over the batch of `||target - S(t, x_t, y)||^2`.
pub fn dsm_loss<S: ScoreFunction + ?Sized>(model: &S, batch: &[DsmSample]) -> Result<f64> {
    Ok(dsm_loss_estimate(model, batch)?.mean)
}

pub fn dsm_loss_estimate<S: ScoreFunction + ?Sized>(
    model: &S,
    batch: &[DsmSample],
) -> Result<LossEstimate> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sums: Sums = chunked_sum(batch, |s| {
        let d = s.x0.len();
        let mut target = vec![0.0; d];
        let mut pred = vec![0.0; d];
        target_into(&s.x0, &s.xt, s.t, &mut target);
        model.eval(s.t, &s.xt, &s.y, &mut pred);
        let r: f64 = target
            .iter()
            .zip(&pred)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Some(Sums { s: r, s2: r * r })
    });
    let n = batch.len() as f64;
    let mean = sums.s / n;
    let var = if batch.len() > 1 {
        (sums.s2 / n - mean * mean).max(0.0) * n / (n - 1.0)
    } else {
        0.0
    };
    Ok(LossEstimate {
        mean,
        stderr: (var / n).sqrt(),
    })
}
