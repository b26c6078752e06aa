//! Karhunen–Loève coefficient representation.
//!
//! A function on `[s_min, s_max]` is stored as its coefficients against the
//! cosine basis `v_j(s) = sqrt(2/L) cos(j π (s - s_min) / L)`, `j = 1..=D`,
//! with `L = s_max - s_min`. Mode index `m` (0-based) carries frequency
//! `j = m + 1`.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::rng::NormalStream;

/// Decay law of a covariance spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecayLaw {
    /// `j^(-alpha)`, `alpha > 1`.
    Polynomial { alpha: f64 },
    /// `exp(-gamma j)`, `gamma > 0`.
    Exponential { gamma: f64 },
    /// Constant `c > 0`. Only summable after truncation.
    Flat { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpectrum {
    eigenvalues: Vec<f64>,
}

impl CovarianceSpectrum {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidArgument(
                "spectrum must have at least one mode".into(),
            ));
        }
        if let Some((j, v)) = eigenvalues
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "eigenvalue {j} must be positive and finite, got {v}"
            )));
        }
        Ok(Self { eigenvalues })
    }

    pub fn from_law(law: DecayLaw, d: usize) -> Result<Self> {
        build_spectrum(law, d)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    #[inline]
    pub fn get(&self, m: usize) -> f64 {
        self.eigenvalues[m]
    }
}

pub fn build_spectrum(law: DecayLaw, d: usize) -> Result<CovarianceSpectrum> {
    if d == 0 {
        return Err(Error::InvalidArgument(
            "truncation level D must be >= 1".into(),
        ));
    }
    let eig: Vec<f64> = match law {
        DecayLaw::Polynomial { alpha } => {
            if !(alpha > 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "polynomial decay needs alpha > 1 for a summable tail, got {alpha}"
                )));
            }
            (1..=d).map(|j| (j as f64).powf(-alpha)).collect()
        }
        DecayLaw::Exponential { gamma } => {
            if !(gamma > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "exponential decay needs gamma > 0, got {gamma}"
                )));
            }
            (1..=d).map(|j| (-gamma * j as f64).exp()).collect()
        }
        DecayLaw::Flat { c } => {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "flat level must be > 0, got {c}"
                )));
            }
            vec![c; d]
        }
    };
    CovarianceSpectrum::new(eig)
}

/// Truncated coefficient vector `<x, v_j>`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeVector(pub Vec<f64>);

impl ModeVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn unit(d: usize, m: usize) -> Self {
        let mut v = Self::zeros(d);
        v.0[m] = 1.0;
        v
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum()
    }
}

impl From<Vec<f64>> for ModeVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ModeVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModeVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Strictly increasing evaluation points inside a domain interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
    domain: (f64, f64),
}

impl Grid {
    pub fn new(points: Vec<f64>, domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("empty domain [{lo}, {hi}]")));
        }
        if points.len() < 2 {
            return Err(Error::InvalidArgument(
                "grid needs at least 2 points".into(),
            ));
        }
        if !points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "grid points must be strictly increasing".into(),
            ));
        }
        if points[0] < lo || points[points.len() - 1] > hi {
            return Err(Error::InvalidArgument(
                "grid points outside the domain".into(),
            ));
        }
        Ok(Self { points, domain })
    }

    /// `n` equispaced points including both endpoints.
    pub fn uniform(domain: (f64, f64), n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(
                "grid needs at least 2 points".into(),
            ));
        }
        let (lo, hi) = domain;
        let h = (hi - lo) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        points[n - 1] = hi;
        Self::new(points, domain)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn domain_length(&self) -> f64 {
        self.domain.1 - self.domain.0
    }

    /// Trapezoidal quadrature weights over the span of the points.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let p = &self.points;
        let n = p.len();
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let h = 0.5 * (p[i + 1] - p[i]);
            w[i] += h;
            w[i + 1] += h;
        }
        w
    }

    /// Equispaced and spanning the whole domain.
    pub fn is_regular(&self) -> bool {
        let p = &self.points;
        let n = p.len();
        let (lo, hi) = self.domain;
        let h = (hi - lo) / (n - 1) as f64;
        let tol = 1e-12 * (hi - lo);
        (p[0] - lo).abs() <= tol
            && (p[n - 1] - hi).abs() <= tol
            && p.iter()
                .enumerate()
                .all(|(i, s)| (s - (lo + h * i as f64)).abs() <= tol)
    }

    /// Linear interpolation of grid values at `s` (clamped to the point span).
    pub fn interpolate(&self, values: &[f64], s: f64) -> f64 {
        let p = &self.points;
        if s <= p[0] {
            return values[0];
        }
        let n = p.len();
        if s >= p[n - 1] {
            return values[n - 1];
        }
        let i = p.partition_point(|&q| q <= s) - 1;
        let w = (s - p[i]) / (p[i + 1] - p[i]);
        values[i] * (1.0 - w) + values[i + 1] * w
    }
}

/// Basis function for mode `m` (frequency `m + 1`).
#[inline]
pub fn basis_function(m: usize, s: f64, domain: (f64, f64)) -> f64 {
    let len = domain.1 - domain.0;
    (2.0 / len).sqrt() * (((m + 1) as f64) * PI * (s - domain.0) / len).cos()
}

/// Coefficient draw `mean_j + sqrt(eigenvalue_j) * xi_j`.
pub fn sample_gaussian<R: NormalStream + ?Sized>(
    spectrum: &CovarianceSpectrum,
    mean: &ModeVector,
    rng: &mut R,
) -> Result<ModeVector> {
    ensure_len(spectrum.len(), mean.len())?;
    Ok(mean
        .iter()
        .zip(spectrum.eigenvalues())
        .map(|(m, ev)| m + ev.sqrt() * rng.standard_normal())
        .collect::<Vec<_>>()
        .into())
}

pub fn evaluate_on_grid(v: &ModeVector, grid: &Grid) -> Vec<f64> {
    let dom = grid.domain();
    grid.points()
        .iter()
        .map(|&s| {
            v.iter()
                .enumerate()
                .map(|(m, c)| c * basis_function(m, s, dom))
                .sum()
        })
        .collect()
}

/// Projects grid values onto the first `d` basis functions.
///
/// Regular grids use trapezoidal inner products (the cosine basis is
/// discretely orthonormal there once `N >= d + 2`); anything else is solved as
/// a least-squares problem through the normal equations.
pub fn project_to_modes(values: &[f64], grid: &Grid, d: usize) -> Result<ModeVector> {
    ensure_len(grid.len(), values.len())?;
    let n = grid.len();
    if n < d {
        return Err(Error::InvalidArgument(format!(
            "projection onto {d} modes needs at least {d} grid points, got {n}"
        )));
    }
    let dom = grid.domain();
    if grid.is_regular() && n >= d + 2 {
        let w = grid.trapezoid_weights();
        let coeffs = (0..d)
            .map(|m| {
                grid.points()
                    .iter()
                    .zip(values)
                    .zip(&w)
                    .map(|((&s, f), w)| w * f * basis_function(m, s, dom))
                    .sum()
            })
            .collect::<Vec<f64>>();
        return Ok(coeffs.into());
    }
    let design = DMatrix::from_fn(n, d, |i, m| basis_function(m, grid.points()[i], dom));
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * DVector::from_column_slice(values);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("basis Gram matrix on this grid".into()))?;
    Ok(chol.solve(&rhs).as_slice().to_vec().into())
}

/// Gram matrix of the first `d` basis functions under trapezoidal quadrature.
pub fn quadrature_gram(grid: &Grid, d: usize) -> DMatrix<f64> {
    let w = grid.trapezoid_weights();
    let dom = grid.domain();
    DMatrix::from_fn(d, d, |a, b| {
        grid.points()
            .iter()
            .zip(&w)
            .map(|(&s, w)| w * basis_function(a, s, dom) * basis_function(b, s, dom))
            .sum()
    })
}
