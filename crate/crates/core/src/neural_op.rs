//! A small one-dimensional Fourier neural operator with hand-written
//! reverse-mode gradients, plus the stylized conditional example it is
//! trained on.
//!
//! Layout per grid point `s_n`:
//!
//! ```text
//! [phi_1(t) .. phi_8(t), s, y(s), x(s)]  --lift-->  W channels
//!   --> L x [ silu( F^-1 (R_k . F h)_k<K + h W_l + b_l ) ]
//!   --> relu(h P_1 + c_1) p_2 + c_2
//! ```
//!
//! `F` is a Fourier transform against the true coordinates (trapezoid weights
//! over the domain), so the same filters act on any grid. No parameter depends
//! on the number of grid points.

use std::path::Path;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, NormalStream, StreamRng};
use crate::spectral::Grid;

pub const TIME_FEATURES: usize = 8;
pub const IN_CHANNELS: usize = TIME_FEATURES + 3;

/// Examples per gradient partial sum; fixed so reductions do not depend on
/// the thread count.
const GRAD_CHUNK: usize = 8;

/// Reverse-diffusion samples advanced together.
const SAMPLE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorArch {
    pub lift_width: usize,
    pub n_spectral_layers: usize,
    pub n_modes_kept: usize,
    pub proj_width: usize,
}

impl Default for OperatorArch {
    fn default() -> Self {
        Self {
            lift_width: 128,
            n_spectral_layers: 5,
            n_modes_kept: 5,
            proj_width: 128,
        }
    }
}

impl OperatorArch {
    /// Reduced width for single-core runs.
    pub fn desk() -> Self {
        Self {
            lift_width: 32,
            n_spectral_layers: 4,
            n_modes_kept: 5,
            proj_width: 32,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lift_width == 0
            || self.n_spectral_layers == 0
            || self.n_modes_kept == 0
            || self.proj_width == 0
        {
            return Err(Error::InvalidArgument(format!(
                "all architecture sizes must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerOffsets {
    spec_re: usize,
    spec_im: usize,
    skip_w: usize,
    skip_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Offsets {
    lift_w: usize,
    lift_b: usize,
    layers: Vec<LayerOffsets>,
    proj1_w: usize,
    proj1_b: usize,
    proj2_w: usize,
    proj2_b: usize,
    total: usize,
}

impl Offsets {
    fn new(a: &OperatorArch) -> Self {
        let (w, k, h) = (a.lift_width, a.n_modes_kept, a.proj_width);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let lift_w = take(IN_CHANNELS * w);
        let lift_b = take(w);
        let layers = (0..a.n_spectral_layers)
            .map(|_| LayerOffsets {
                spec_re: take(k * w * w),
                spec_im: take(k * w * w),
                skip_w: take(w * w),
                skip_b: take(w),
            })
            .collect();
        let proj1_w = take(w * h);
        let proj1_b = take(h);
        let proj2_w = take(h);
        let proj2_b = take(1);
        Self {
            lift_w,
            lift_b,
            layers,
            proj1_w,
            proj1_b,
            proj2_w,
            proj2_b,
            total: at,
        }
    }
}

/// Named block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Section {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorParams {
    arch: OperatorArch,
    offsets: Offsets,
    data: Vec<f64>,
}

impl OperatorParams {
    pub fn zeros(arch: OperatorArch) -> Result<Self> {
        arch.validate()?;
        let offsets = Offsets::new(&arch);
        let data = vec![0.0; offsets.total];
        Ok(Self {
            arch,
            offsets,
            data,
        })
    }

    /// Scaled Gaussian initialization.
    pub fn init(arch: OperatorArch, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = substream(seed, u64::MAX);
        let (w, k, h) = (
            arch.lift_width as f64,
            arch.n_modes_kept as f64,
            arch.proj_width as f64,
        );
        let sections = p.sections();
        for sec in sections {
            let sd = match sec.name.rsplit('.').next().unwrap() {
                "lift_w" => (1.0 / IN_CHANNELS as f64).sqrt(),
                "spec_re" | "spec_im" => 0.5 / (w * k).sqrt(),
                "skip_w" => (1.0 / w).sqrt(),
                "proj1_w" => (2.0 / w).sqrt(),
                "proj2_w" => (1.0 / h).sqrt(),
                _ => 0.0,
            };
            for v in &mut p.data[sec.offset..sec.offset + sec.len()] {
                *v = sd * rng.standard_normal();
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> &OperatorArch {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sections(&self) -> Vec<Section> {
        let (w, k, h) = (
            self.arch.lift_width,
            self.arch.n_modes_kept,
            self.arch.proj_width,
        );
        let o = &self.offsets;
        let sec = |name: String, shape: Vec<usize>, offset| Section {
            name,
            shape,
            offset,
        };
        let mut out = vec![
            sec("lift_w".into(), vec![IN_CHANNELS, w], o.lift_w),
            sec("lift_b".into(), vec![w], o.lift_b),
        ];
        for (l, lo) in o.layers.iter().enumerate() {
            out.push(sec(format!("layer{l}.spec_re"), vec![k, w, w], lo.spec_re));
            out.push(sec(format!("layer{l}.spec_im"), vec![k, w, w], lo.spec_im));
            out.push(sec(format!("layer{l}.skip_w"), vec![w, w], lo.skip_w));
            out.push(sec(format!("layer{l}.skip_b"), vec![w], lo.skip_b));
        }
        out.push(sec("proj1_w".into(), vec![w, h], o.proj1_w));
        out.push(sec("proj1_b".into(), vec![h], o.proj1_b));
        out.push(sec("proj2_w".into(), vec![h], o.proj2_w));
        out.push(sec("proj2_b".into(), vec![1], o.proj2_b));
        out
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn section_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.sections().into_iter().find(|s| s.name == name)?;
        Some(&mut self.data[s.offset..s.offset + s.len()])
    }

    fn mat(&self, off: usize, r: usize, c: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((r, c), &self.data[off..off + r * c]).expect("layout")
    }

    fn mat_mut(&mut self, off: usize, r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((r, c), &mut self.data[off..off + r * c]).expect("layout")
    }

    fn vec(&self, off: usize, n: usize) -> &[f64] {
        &self.data[off..off + n]
    }

    fn add_assign(&mut self, other: &OperatorParams) {
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

/// Forward and inverse truncated Fourier maps for one grid.
#[derive(Debug, Clone)]
pub struct SpectralPlan {
    fwd_c: Array2<f64>,
    fwd_s: Array2<f64>,
    inv_c: Array2<f64>,
    inv_s: Array2<f64>,
}

impl SpectralPlan {
    /// Frequencies at or above the grid's Nyquist limit are zeroed, so the
    /// shapes only depend on `n_modes`.
    pub fn new(grid: &Grid, n_modes: usize) -> Self {
        let n = grid.len();
        let (lo, _) = grid.domain();
        let period = grid.domain_length();
        let w = grid.trapezoid_weights();
        let mut fwd_c = Array2::zeros((n_modes, n));
        let mut fwd_s = Array2::zeros((n_modes, n));
        let mut inv_c = Array2::zeros((n, n_modes));
        let mut inv_s = Array2::zeros((n, n_modes));
        for k in 0..n_modes {
            if 2 * k >= n {
                break;
            }
            let mult = if k == 0 { 1.0 } else { 2.0 };
            for (i, &x) in grid.points().iter().enumerate() {
                let theta = 2.0 * std::f64::consts::PI * k as f64 * (x - lo) / period;
                let (sn, cs) = theta.sin_cos();
                fwd_c[[k, i]] = w[i] * cs / period;
                fwd_s[[k, i]] = -w[i] * sn / period;
                inv_c[[i, k]] = mult * cs;
                inv_s[[i, k]] = mult * sn;
            }
        }
        Self {
            fwd_c,
            fwd_s,
            inv_c,
            inv_s,
        }
    }
}

/// Eight sinusoidal features of the noise level `sqrt(1 - e^{-t})`.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let sigma = (-(-t).exp_m1()).max(0.0).sqrt();
    let mut f = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let (sn, cs) = ((k + 1) as f64 * std::f64::consts::FRAC_PI_2 * sigma).sin_cos();
        f[2 * k] = sn;
        f[2 * k + 1] = cs;
    }
    f
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerCache {
    input: Array2<f64>,
    vr: Array2<f64>,
    vi: Array2<f64>,
    pre: Array2<f64>,
}

struct Cache {
    feats: Array2<f64>,
    layers: Vec<LayerCache>,
    last: Array2<f64>,
    a1: Array2<f64>,
}

fn check_lengths(n: usize, y: &[f64], x: &[f64]) -> Result<()> {
    if y.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if x.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: x.len(),
        });
    }
    Ok(())
}

fn forward_cached(
    p: &OperatorParams,
    plan: &SpectralPlan,
    t: f64,
    s: &[f64],
    y: &[f64],
    x: &[f64],
) -> (Array1<f64>, Cache) {
    let a = p.arch;
    let (w, k_modes, h) = (a.lift_width, a.n_modes_kept, a.proj_width);
    let o = &p.offsets;
    let n = s.len();

    let tf = time_features(t);
    let mut feats = Array2::zeros((n, IN_CHANNELS));
    for i in 0..n {
        let mut row = feats.row_mut(i);
        for (c, v) in tf.iter().enumerate() {
            row[c] = *v;
        }
        row[TIME_FEATURES] = s[i];
        row[TIME_FEATURES + 1] = y[i];
        row[TIME_FEATURES + 2] = x[i];
    }
    let mut hcur = Array2::from_shape_fn((n, w), |(_, c)| p.data[o.lift_b + c]);
    general_mat_mul(
        1.0,
        &feats,
        &p.mat(o.lift_w, IN_CHANNELS, w),
        1.0,
        &mut hcur,
    );

    let mut layers = Vec::with_capacity(a.n_spectral_layers);
    for lo in &o.layers {
        let vr = plan.fwd_c.dot(&hcur);
        let vi = plan.fwd_s.dot(&hcur);
        let mut ur = Array2::zeros((k_modes, w));
        let mut ui = Array2::zeros((k_modes, w));
        for k in 0..k_modes {
            let mr = p.mat(lo.spec_re + k * w * w, w, w);
            let mi = p.mat(lo.spec_im + k * w * w, w, w);
            let (vrk, vik) = (vr.slice(s![k..k + 1, ..]), vi.slice(s![k..k + 1, ..]));
            let mut urk = ur.slice_mut(s![k..k + 1, ..]);
            general_mat_mul(1.0, &vrk, &mr, 0.0, &mut urk);
            general_mat_mul(-1.0, &vik, &mi, 1.0, &mut urk);
            let mut uik = ui.slice_mut(s![k..k + 1, ..]);
            general_mat_mul(1.0, &vik, &mr, 0.0, &mut uik);
            general_mat_mul(1.0, &vrk, &mi, 1.0, &mut uik);
        }
        let mut pre = Array2::from_shape_fn((n, w), |(_, c)| p.data[lo.skip_b + c]);
        general_mat_mul(1.0, &hcur, &p.mat(lo.skip_w, w, w), 1.0, &mut pre);
        general_mat_mul(1.0, &plan.inv_c, &ur, 1.0, &mut pre);
        general_mat_mul(-1.0, &plan.inv_s, &ui, 1.0, &mut pre);
        let next = pre.mapv(|v| v * sigmoid(v));
        layers.push(LayerCache {
            input: hcur,
            vr,
            vi,
            pre,
        });
        hcur = next;
    }

    let mut a1 = Array2::from_shape_fn((n, h), |(_, c)| p.data[o.proj1_b + c]);
    general_mat_mul(1.0, &hcur, &p.mat(o.proj1_w, w, h), 1.0, &mut a1);
    let p2 = Array1::from(p.vec(o.proj2_w, h).to_vec());
    let out = a1.mapv(|v| v.max(0.0)).dot(&p2) + p.data[o.proj2_b];
    (
        out,
        Cache {
            feats,
            layers,
            last: hcur,
            a1,
        },
    )
}

fn backward_cached(
    p: &OperatorParams,
    plan: &SpectralPlan,
    cache: &Cache,
    dout: &Array1<f64>,
    g: &mut OperatorParams,
) {
    let a = p.arch;
    let (w, k_modes, h) = (a.lift_width, a.n_modes_kept, a.proj_width);
    let o = p.offsets.clone();

    let relu = cache.a1.mapv(|v| v.max(0.0));
    g.data[o.proj2_b] += dout.sum();
    {
        let gp2 = relu.t().dot(dout);
        g.data[o.proj2_w..o.proj2_w + h]
            .iter_mut()
            .zip(gp2.iter())
            .for_each(|(a, b)| *a += b);
    }
    let p2 = p.vec(o.proj2_w, h);
    let mut da1 = Array2::from_shape_fn(cache.a1.dim(), |(i, c)| {
        if cache.a1[[i, c]] > 0.0 {
            dout[i] * p2[c]
        } else {
            0.0
        }
    });
    general_mat_mul(
        1.0,
        &cache.last.t(),
        &da1,
        1.0,
        &mut g.mat_mut(o.proj1_w, w, h),
    );
    add_colsum(&mut g.data[o.proj1_b..o.proj1_b + h], &da1);
    let mut dh = da1.dot(&p.mat(o.proj1_w, w, h).t());
    da1 = Array2::zeros((0, 0));
    drop(da1);

    for (lc, lo) in cache.layers.iter().zip(&o.layers).rev() {
        let dpre = Array2::from_shape_fn(dh.dim(), |(i, c)| {
            let x = lc.pre[[i, c]];
            let sg = sigmoid(x);
            dh[[i, c]] * sg * (1.0 + x * (1.0 - sg))
        });
        general_mat_mul(
            1.0,
            &lc.input.t(),
            &dpre,
            1.0,
            &mut g.mat_mut(lo.skip_w, w, w),
        );
        add_colsum(&mut g.data[lo.skip_b..lo.skip_b + w], &dpre);
        let mut dinput = dpre.dot(&p.mat(lo.skip_w, w, w).t());

        let dur = plan.inv_c.t().dot(&dpre);
        let dui = -plan.inv_s.t().dot(&dpre);
        let mut dvr = Array2::zeros((k_modes, w));
        let mut dvi = Array2::zeros((k_modes, w));
        for k in 0..k_modes {
            let (vrk, vik) = (lc.vr.slice(s![k..k + 1, ..]), lc.vi.slice(s![k..k + 1, ..]));
            let (durk, duik) = (dur.slice(s![k..k + 1, ..]), dui.slice(s![k..k + 1, ..]));
            {
                let mut gmr = g.mat_mut(lo.spec_re + k * w * w, w, w);
                general_mat_mul(1.0, &vrk.t(), &durk, 1.0, &mut gmr);
                general_mat_mul(1.0, &vik.t(), &duik, 1.0, &mut gmr);
            }
            {
                let mut gmi = g.mat_mut(lo.spec_im + k * w * w, w, w);
                general_mat_mul(-1.0, &vik.t(), &durk, 1.0, &mut gmi);
                general_mat_mul(1.0, &vrk.t(), &duik, 1.0, &mut gmi);
            }
            let mr = p.mat(lo.spec_re + k * w * w, w, w);
            let mi = p.mat(lo.spec_im + k * w * w, w, w);
            let mut dvrk = dvr.slice_mut(s![k..k + 1, ..]);
            general_mat_mul(1.0, &durk, &mr.t(), 0.0, &mut dvrk);
            general_mat_mul(1.0, &duik, &mi.t(), 1.0, &mut dvrk);
            let mut dvik = dvi.slice_mut(s![k..k + 1, ..]);
            general_mat_mul(-1.0, &durk, &mi.t(), 0.0, &mut dvik);
            general_mat_mul(1.0, &duik, &mr.t(), 1.0, &mut dvik);
        }
        general_mat_mul(1.0, &plan.fwd_c.t(), &dvr, 1.0, &mut dinput);
        general_mat_mul(1.0, &plan.fwd_s.t(), &dvi, 1.0, &mut dinput);
        dh = dinput;
    }

    general_mat_mul(
        1.0,
        &cache.feats.t(),
        &dh,
        1.0,
        &mut g.mat_mut(o.lift_w, IN_CHANNELS, w),
    );
    add_colsum(&mut g.data[o.lift_b..o.lift_b + w], &dh);
}

fn add_colsum(dst: &mut [f64], m: &Array2<f64>) {
    for (d, v) in dst.iter_mut().zip(m.sum_axis(Axis(0)).iter()) {
        *d += v;
    }
}

/// Inference-only forward pass for `B` inputs sharing one grid and one time.
/// Rows of the hidden state are ordered point-major (`n * B + b`) so the
/// spectral transforms act on all inputs in one product.
fn forward_many(
    p: &OperatorParams,
    plan: &SpectralPlan,
    t: f64,
    s: &[f64],
    y: &[f64],
    x: &Array2<f64>,
) -> Array2<f64> {
    let a = p.arch;
    let (w, k_modes, hd) = (a.lift_width, a.n_modes_kept, a.proj_width);
    let o = &p.offsets;
    let (nb, n) = x.dim();
    let tf = time_features(t);

    let mut feats = Array2::zeros((n * nb, IN_CHANNELS));
    for i in 0..n {
        for b in 0..nb {
            let mut row = feats.row_mut(i * nb + b);
            for (c, v) in tf.iter().enumerate() {
                row[c] = *v;
            }
            row[TIME_FEATURES] = s[i];
            row[TIME_FEATURES + 1] = y[i];
            row[TIME_FEATURES + 2] = x[[b, i]];
        }
    }
    let mut h = Array2::from_shape_fn((n * nb, w), |(_, c)| p.data[o.lift_b + c]);
    general_mat_mul(1.0, &feats, &p.mat(o.lift_w, IN_CHANNELS, w), 1.0, &mut h);

    for lo in &o.layers {
        let hw = h
            .view()
            .into_shape_with_order((n, nb * w))
            .expect("contiguous");
        let vr = plan
            .fwd_c
            .dot(&hw)
            .into_shape_with_order((k_modes * nb, w))
            .expect("contiguous");
        let vi = plan
            .fwd_s
            .dot(&hw)
            .into_shape_with_order((k_modes * nb, w))
            .expect("contiguous");
        let mut ur = Array2::zeros((k_modes * nb, w));
        let mut ui = Array2::zeros((k_modes * nb, w));
        for k in 0..k_modes {
            let rows = s![k * nb..(k + 1) * nb, ..];
            let mr = p.mat(lo.spec_re + k * w * w, w, w);
            let mi = p.mat(lo.spec_im + k * w * w, w, w);
            let mut urk = ur.slice_mut(rows);
            general_mat_mul(1.0, &vr.slice(rows), &mr, 0.0, &mut urk);
            general_mat_mul(-1.0, &vi.slice(rows), &mi, 1.0, &mut urk);
            let mut uik = ui.slice_mut(rows);
            general_mat_mul(1.0, &vi.slice(rows), &mr, 0.0, &mut uik);
            general_mat_mul(1.0, &vr.slice(rows), &mi, 1.0, &mut uik);
        }
        let mut pre = Array2::from_shape_fn((n * nb, w), |(_, c)| p.data[lo.skip_b + c]);
        general_mat_mul(1.0, &h, &p.mat(lo.skip_w, w, w), 1.0, &mut pre);
        {
            let mut pw = pre
                .view_mut()
                .into_shape_with_order((n, nb * w))
                .expect("contiguous");
            let urw = ur
                .view()
                .into_shape_with_order((k_modes, nb * w))
                .expect("contiguous");
            let uiw = ui
                .view()
                .into_shape_with_order((k_modes, nb * w))
                .expect("contiguous");
            general_mat_mul(1.0, &plan.inv_c, &urw, 1.0, &mut pw);
            general_mat_mul(-1.0, &plan.inv_s, &uiw, 1.0, &mut pw);
        }
        pre.mapv_inplace(|v| v * sigmoid(v));
        h = pre;
    }

    let mut a1 = Array2::from_shape_fn((n * nb, hd), |(_, c)| p.data[o.proj1_b + c]);
    general_mat_mul(1.0, &h, &p.mat(o.proj1_w, w, hd), 1.0, &mut a1);
    a1.mapv_inplace(|v| v.max(0.0));
    let p2 = ArrayView1::from(p.vec(o.proj2_w, hd));
    let out = a1.dot(&p2) + p.data[o.proj2_b];
    out.into_shape_with_order((n, nb))
        .expect("contiguous")
        .reversed_axes()
        .as_standard_layout()
        .to_owned()
}

/// Operator output at every grid point.
pub fn op_forward(
    params: &OperatorParams,
    t: f64,
    y_vals: &[f64],
    x_vals: &[f64],
    grid: &Grid,
) -> Result<Vec<f64>> {
    check_lengths(grid.len(), y_vals, x_vals)?;
    let plan = SpectralPlan::new(grid, params.arch.n_modes_kept);
    Ok(
        forward_cached(params, &plan, t, grid.points(), y_vals, x_vals)
            .0
            .to_vec(),
    )
}

/// One regression example on its own grid.
#[derive(Debug, Clone)]
pub struct Example {
    pub t: f64,
    pub grid: Arc<Grid>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub target: Vec<f64>,
}

/// Loss (mean over examples of the mean squared residual over grid points)
/// and its exact gradient.
pub fn op_backward(params: &OperatorParams, batch: &[Example]) -> Result<(f64, OperatorParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for e in batch {
        check_lengths(e.grid.len(), &e.y, &e.x)?;
        check_lengths(e.grid.len(), &e.target, &e.target)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, OperatorParams)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = OperatorParams::zeros(params.arch).expect("validated");
            let mut loss = 0.0;
            let mut plan: Option<(Arc<Grid>, SpectralPlan)> = None;
            for e in chunk {
                if !plan
                    .as_ref()
                    .is_some_and(|(gr, _)| Arc::ptr_eq(gr, &e.grid))
                {
                    plan = Some((
                        e.grid.clone(),
                        SpectralPlan::new(&e.grid, params.arch.n_modes_kept),
                    ));
                }
                let pl = &plan.as_ref().unwrap().1;
                let (out, cache) = forward_cached(params, pl, e.t, e.grid.points(), &e.y, &e.x);
                let n = out.len() as f64;
                let resid = &out - &Array1::from(e.target.clone());
                loss += scale * resid.mapv(|r| r * r).sum() / n;
                let dout = resid.mapv(|r| 2.0 * scale * r / n);
                backward_cached(params, pl, &cache, &dout, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut grad = OperatorParams::zeros(params.arch)?;
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grad.add_assign(g);
    }
    Ok((loss, grad))
}

/// Loss only.
pub fn op_loss(params: &OperatorParams, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<f64> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|e| {
                    let out =
                        op_forward(params, e.t, &e.y, &e.x, &e.grid).expect("checked lengths");
                    let n = out.len() as f64;
                    scale
                        * out
                            .iter()
                            .zip(&e.target)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                        / n
                })
                .sum()
        })
        .collect();
    Ok(parts.iter().sum())
}

/// Step size `lr_start (1 + c k / steps)^{-1/3}`, with `c` chosen so that the
/// last step lands on `lr_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 512,
            steps: 20_000,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, step: usize) -> f64 {
        let c = (self.lr_start / self.lr_end).powi(3) - 1.0;
        let frac = step as f64 / self.steps.max(1) as f64;
        self.lr_start * (1.0 + c * frac).powf(-1.0 / 3.0)
    }
}

/// Supplies one training batch per step.
pub trait DataSource {
    fn batch(&mut self, step: usize, batch_size: usize) -> Vec<Example>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: OperatorParams,
    pub trajectory: Vec<StepLog>,
}

/// Adam with bias-corrected moments. Aborts when the loss stays above ten
/// times its first value for 100 consecutive steps.
pub fn train<D: DataSource + ?Sized>(
    mut params: OperatorParams,
    source: &mut D,
    cfg: &AdamConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.steps == 0 || !(cfg.lr_start > 0.0) || !(cfg.lr_end > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid optimizer settings {cfg:?}"
        )));
    }
    let n = params.n_params();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    let mut above = 0usize;
    for step in 0..cfg.steps {
        let batch = source.batch(step, cfg.batch_size);
        let (loss, grad) = op_backward(&params, &batch)?;
        let lr = cfg.lr(step);
        trajectory.push(StepLog { step, loss, lr });
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss,
                trajectory: trajectory.iter().map(|s| s.loss).collect(),
            });
        }
        let first = *initial.get_or_insert(loss);
        if loss > 10.0 * first {
            above += 1;
            if above >= 100 {
                return Err(Error::Diverged {
                    step,
                    loss,
                    trajectory: trajectory.iter().map(|s| s.loss).collect(),
                });
            }
        } else {
            above = 0;
        }
        let k = (step + 1) as i32;
        let c1 = 1.0 / (1.0 - cfg.beta1.powi(k));
        let c2 = 1.0 / (1.0 - cfg.beta2.powi(k));
        for (((p, g), m), v) in params
            .data
            .iter_mut()
            .zip(&grad.data)
            .zip(&mut m)
            .zip(&mut v)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m * c1) / ((*v * c2).sqrt() + cfg.eps);
        }
    }
    Ok(TrainOutcome { params, trajectory })
}

/// Discrete variance schedule mapped to the continuous clock by
/// `t_k = -sum_{i <= k} ln(1 - beta_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub variance_start: f64,
    pub variance_end: f64,
    pub n_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            variance_start: 1e-4,
            variance_end: 2e-2,
            n_steps: 500,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2
            || !(self.variance_start > 0.0)
            || !(self.variance_end < 1.0)
            || !(self.variance_start < self.variance_end)
        {
            return Err(Error::InvalidArgument(format!(
                "need 0 < start < end < 1 and >= 2 steps: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        let n = self.n_steps;
        (0..n)
            .map(|i| {
                self.variance_start
                    + (self.variance_end - self.variance_start) * i as f64 / (n - 1) as f64
            })
            .collect()
    }

    /// `t_1 < ... < t_n`.
    pub fn times(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.betas()
            .iter()
            .map(|b| {
                acc -= (-b).ln_1p();
                acc
            })
            .collect()
    }
}

/// Affine standardization of the data and conditioning channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            x_mean: 0.0,
            x_std: 1.0,
            y_mean: 0.0,
            y_std: 1.0,
        }
    }
}

/// Stylized target: `x0(s) = a s^2 + eps(s)` with `a` uniform on `{-1, 1}`
/// per function and `eps(s)` i.i.d. Gamma(shape 1, scale 2) per point.
pub fn stylized_x0<R: Rng + ?Sized>(points: &[f64], rng: &mut R) -> Vec<f64> {
    let a = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let gamma = Gamma::new(1.0, 2.0).expect("valid shape and scale");
    points
        .iter()
        .map(|s| a * s * s + gamma.sample(rng))
        .collect()
}

/// Random training grid on `domain`: `n` points, endpoints fixed, interior
/// points jittered by up to 40% of the spacing.
pub fn random_grid<R: Rng + ?Sized>(domain: (f64, f64), n: usize, rng: &mut R) -> Result<Grid> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid needs >= 2 points, got {n}"
        )));
    }
    let h = (domain.1 - domain.0) / (n - 1) as f64;
    let pts = (0..n)
        .map(|i| {
            let base = domain.0 + h * i as f64;
            if i == 0 || i + 1 == n {
                base
            } else {
                base + 0.4 * h * (2.0 * rng.random::<f64>() - 1.0)
            }
        })
        .collect();
    Grid::new(pts, domain)
}

/// Stream of noise-prediction batches for the stylized example.
///
/// Each batch shares one random grid. Targets are the injected standard
/// normal noise, so the operator output approximates
/// `-sqrt(1 - e^{-t}) * score`.
pub struct StylizedData {
    rng: StreamRng,
    times: Vec<f64>,
    norm: Normalization,
    n_range: (usize, usize),
    domain: (f64, f64),
}

impl StylizedData {
    pub fn new(
        seed: u64,
        schedule: &NoiseSchedule,
        n_range: (usize, usize),
        domain: (f64, f64),
    ) -> Result<Self> {
        schedule.validate()?;
        if n_range.0 < 3 || n_range.0 > n_range.1 {
            return Err(Error::InvalidArgument(format!(
                "invalid grid-size range {n_range:?}"
            )));
        }
        // pilot draws fix the standardization
        let mut pilot = substream(seed, 1);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..256 {
            let g = random_grid(
                domain,
                pilot.random_range(n_range.0..=n_range.1),
                &mut pilot,
            )?;
            xs.extend(stylized_x0(g.points(), &mut pilot));
            ys.extend_from_slice(g.points());
        }
        let (xm, xv) = crate::stats::mean_var(&xs);
        let (ym, yv) = crate::stats::mean_var(&ys);
        let norm = Normalization {
            x_mean: xm,
            x_std: xv.sqrt(),
            y_mean: ym,
            y_std: yv.sqrt(),
        };
        Ok(Self {
            rng: substream(seed, 0),
            times: schedule.times(),
            norm,
            n_range,
            domain,
        })
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }
}

impl DataSource for StylizedData {
    fn batch(&mut self, _step: usize, batch_size: usize) -> Vec<Example> {
        let rng = &mut self.rng;
        let n = rng.random_range(self.n_range.0..=self.n_range.1);
        let grid = Arc::new(random_grid(self.domain, n, rng).expect("n >= 3"));
        let nm = self.norm;
        let y: Vec<f64> = grid
            .points()
            .iter()
            .map(|s| (s - nm.y_mean) / nm.y_std)
            .collect();
        (0..batch_size)
            .map(|_| {
                let t = self.times[rng.random_range(0..self.times.len())];
                let decay = (-0.5 * t).exp();
                let sd = (-(-t).exp_m1()).sqrt();
                let x0 = stylized_x0(grid.points(), rng);
                let target: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
                let x = x0
                    .iter()
                    .zip(&target)
                    .map(|(v, z)| decay * (v - nm.x_mean) / nm.x_std + sd * z)
                    .collect();
                Example {
                    t,
                    grid: grid.clone(),
                    y: y.clone(),
                    x,
                    target,
                }
            })
            .collect()
    }
}

/// Reverse-time Euler–Maruyama on the schedule's time points, in standardized
/// coordinates, from `N(0, I)` at `t_n` down to `t = 0`. The score is
/// `-out / sqrt(1 - e^{-t})`.
pub fn reverse_diffuse(
    params: &OperatorParams,
    y_std: &[f64],
    grid: &Grid,
    schedule: &NoiseSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    schedule.validate()?;
    check_lengths(grid.len(), y_std, y_std)?;
    let plan = SpectralPlan::new(grid, params.arch.n_modes_kept);
    let mut times = vec![0.0];
    times.extend(schedule.times());
    let n = grid.len();
    let ids: Vec<u64> = (0..n_samples as u64).collect();
    let chunks: Vec<Vec<Vec<f64>>> = ids
        .par_chunks(SAMPLE_CHUNK)
        .map(|ids| {
            let mut rngs: Vec<StreamRng> = ids.iter().map(|&i| substream(seed, i)).collect();
            let mut z = Array2::from_shape_fn((ids.len(), n), |_| 0.0);
            for (b, rng) in rngs.iter_mut().enumerate() {
                z.row_mut(b)
                    .iter_mut()
                    .for_each(|v| *v = rng.standard_normal());
            }
            for k in (1..times.len()).rev() {
                let t = times[k];
                let h = t - times[k - 1];
                let out = forward_many(params, &plan, t, grid.points(), y_std, &z);
                let inv_sd = 1.0 / (-(-t).exp_m1()).sqrt();
                let sh = h.sqrt();
                for (b, rng) in rngs.iter_mut().enumerate() {
                    for (zi, o) in z.row_mut(b).iter_mut().zip(out.row(b)) {
                        *zi += h * (0.5 * *zi - o * inv_sd) + sh * rng.standard_normal();
                    }
                }
                if let Some(((_, j), v)) = z.indexed_iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        step: times.len() - 1 - k,
                        mode: j,
                        value: *v,
                    });
                }
            }
            Ok(z.outer_iter().map(|r| r.to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Conditional samples of the stylized example on `grid`, in data units.
pub fn sample_stylized(
    ckpt: &Checkpoint,
    grid: &Grid,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let nm = ckpt.normalization;
    let y: Vec<f64> = grid
        .points()
        .iter()
        .map(|s| (s - nm.y_mean) / nm.y_std)
        .collect();
    let z = reverse_diffuse(&ckpt.params, &y, grid, &ckpt.schedule, n_samples, seed)?;
    Ok(z.into_iter()
        .map(|v| v.into_iter().map(|u| nm.x_mean + nm.x_std * u).collect())
        .collect())
}

pub const CHECKPOINT_FORMAT: &str = "hsl-fno";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: OperatorParams,
    pub normalization: Normalization,
    pub schedule: NoiseSchedule,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    arch: OperatorArch,
    normalization: Normalization,
    schedule: NoiseSchedule,
    sections: Vec<SectionData>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionData {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.params.arch,
            normalization: self.normalization,
            schedule: self.schedule,
            sections: self
                .params
                .sections()
                .into_iter()
                .map(|s| SectionData {
                    data: self.params.data[s.offset..s.offset + s.len()].to_vec(),
                    name: s.name,
                    shape: s.shape,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let mut params = OperatorParams::zeros(file.arch)?;
        let expected = params.sections();
        if expected.len() != file.sections.len() {
            return Err(Error::Checkpoint(
                "section count does not match the architecture".into(),
            ));
        }
        for (want, got) in expected.iter().zip(&file.sections) {
            if want.name != got.name || want.shape != got.shape || got.data.len() != want.len() {
                return Err(Error::Checkpoint(format!(
                    "section {} does not match the architecture",
                    got.name
                )));
            }
            params.data[want.offset..want.offset + want.len()].copy_from_slice(&got.data);
        }
        file.schedule.validate()?;
        Ok(Self {
            params,
            normalization: file.normalization,
            schedule: file.schedule,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> OperatorArch {
        OperatorArch {
            lift_width: 6,
            n_spectral_layers: 2,
            n_modes_kept: 3,
            proj_width: 5,
        }
    }

    fn smooth(grid: &Grid) -> (Vec<f64>, Vec<f64>) {
        let y = grid.points().iter().map(|s| (0.7 * s).sin()).collect();
        let x = grid
            .points()
            .iter()
            .map(|s| 0.3 * s * s - 0.5 * (1.3 * s).cos())
            .collect();
        (y, x)
    }

    #[test]
    fn parameter_count_depends_on_arch_only() {
        let a = tiny();
        let p = OperatorParams::init(a, 1).unwrap();
        let (w, k, h, l) = (6, 3, 5, 2);
        assert_eq!(
            p.n_params(),
            IN_CHANNELS * w + w + l * (2 * k * w * w + w * w + w) + w * h + h + h + 1
        );
        let covered: usize = p.sections().iter().map(Section::len).sum();
        assert_eq!(covered, p.n_params());
        for n in 15..=50 {
            let g = Grid::uniform((-3.0, 3.0), n).unwrap();
            let (y, x) = smooth(&g);
            assert_eq!(op_forward(&p, 0.3, &y, &x, &g).unwrap().len(), n);
        }
        assert_eq!(p.n_params(), OperatorParams::init(a, 1).unwrap().n_params());
        assert!(OperatorParams::zeros(OperatorArch { lift_width: 0, ..a }).is_err());
    }

    #[test]
    fn batched_forward_matches_single() {
        let p = OperatorParams::init(tiny(), 3).unwrap();
        let g = random_grid((-3.0, 3.0), 17, &mut StreamRng::seed_from_u64(2)).unwrap();
        let plan = SpectralPlan::new(&g, 3);
        let y: Vec<f64> = g.points().iter().map(|s| s.sin()).collect();
        let x = Array2::from_shape_fn((5, 17), |(b, i)| {
            (b as f64 - 2.0) * 0.3 + (i as f64 * 0.7).cos()
        });
        let many = forward_many(&p, &plan, 0.8, g.points(), &y, &x);
        for b in 0..5 {
            let one = op_forward(&p, 0.8, &y, &x.row(b).to_vec(), &g).unwrap();
            for (u, v) in one.iter().zip(many.row(b)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_map_to_zero() {
        let p = OperatorParams::zeros(tiny()).unwrap();
        let g = Grid::uniform((-3.0, 3.0), 20).unwrap();
        let (y, x) = smooth(&g);
        assert!(op_forward(&p, 1.0, &y, &x, &g)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        assert!(matches!(
            op_forward(&p, 1.0, &y[..3], &x, &g),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn skip_path_by_hand() {
        // one channel, spectral filters off, identity skip, identity-like head
        let arch = OperatorArch {
            lift_width: 1,
            n_spectral_layers: 1,
            n_modes_kept: 1,
            proj_width: 1,
        };
        let mut p = OperatorParams::zeros(arch).unwrap();
        // lift reads the x channel
        p.section_mut("lift_w").unwrap()[TIME_FEATURES + 2] = 1.0;
        p.section_mut("lift_b").unwrap()[0] = 0.5;
        p.section_mut("layer0.skip_w").unwrap()[0] = 2.0;
        p.section_mut("layer0.skip_b").unwrap()[0] = -0.25;
        p.section_mut("proj1_w").unwrap()[0] = 1.0;
        p.section_mut("proj1_b").unwrap()[0] = 3.0;
        p.section_mut("proj2_w").unwrap()[0] = 1.5;
        p.section_mut("proj2_b").unwrap()[0] = 0.1;
        let g = Grid::new(vec![0.0, 1.0, 2.0, 3.0], (0.0, 3.0)).unwrap();
        let x = [0.0, 1.0, -1.0, 2.0];
        let out = op_forward(&p, 0.5, &[0.0; 4], &x, &g).unwrap();
        for (o, xv) in out.iter().zip(x) {
            let pre: f64 = 2.0 * (xv + 0.5) - 0.25;
            let h = pre / (1.0 + (-pre).exp());
            let expected = 1.5 * (h + 3.0f64).max(0.0) + 0.1;
            assert!((o - expected).abs() < 1e-14, "{o} vs {expected}");
        }
    }

    fn random_batch(seed: u64, arch: OperatorArch) -> (OperatorParams, Vec<Example>) {
        let p = OperatorParams::init(arch, seed).unwrap();
        let mut rng = StreamRng::seed_from_u64(seed);
        let batch = (0..3)
            .map(|i| {
                let g = Arc::new(random_grid((-3.0, 3.0), 9 + 2 * i, &mut rng).unwrap());
                let n = g.len();
                Example {
                    t: 0.05 + rng.random::<f64>(),
                    y: (0..n).map(|_| rng.standard_normal()).collect(),
                    x: (0..n).map(|_| rng.standard_normal()).collect(),
                    target: (0..n).map(|_| rng.standard_normal()).collect(),
                    grid: g,
                }
            })
            .collect();
        (p, batch)
    }

    #[test]
    fn gradients_match_central_differences() {
        let arch = tiny();
        for seed in [1, 2, 3] {
            let (p, batch) = random_batch(seed, arch);
            let (_, grad) = op_backward(&p, &batch).unwrap();
            let mut rng = StreamRng::seed_from_u64(100 + seed);
            for _ in 0..100 {
                let i = rng.random_range(0..p.n_params());
                let h = 1e-5;
                let mut plus = p.clone();
                plus.data[i] += h;
                let mut minus = p.clone();
                minus.data[i] -= h;
                let fd = (op_loss(&plus, &batch).unwrap() - op_loss(&minus, &batch).unwrap())
                    / (2.0 * h);
                let an = grad.data[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                assert!(rel < 1e-4, "seed {seed} coord {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn zero_point_gradients_and_mean_reduction() {
        let arch = tiny();
        let (_, mut batch) = random_batch(4, arch);
        for e in &mut batch {
            e.target.iter_mut().for_each(|v| *v = 0.0);
        }
        let (loss, g) = op_backward(&OperatorParams::zeros(arch).unwrap(), &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|v| *v == 0.0));

        let (p, batch) = random_batch(5, arch);
        let (l1, g1) = op_backward(&p, &batch).unwrap();
        let doubled: Vec<Example> = batch.iter().chain(batch.iter()).cloned().collect();
        let (l2, g2) = op_backward(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!(op_backward(&p, &[]).is_err());
    }

    #[test]
    fn resolution_consistency() {
        let p = OperatorParams::init(OperatorArch::desk(), 7).unwrap();
        for n in [20, 25, 33] {
            let coarse = Grid::uniform((-3.0, 3.0), n).unwrap();
            let fine = Grid::uniform((-3.0, 3.0), 2 * n - 1).unwrap();
            let (yc, xc) = smooth(&coarse);
            let (yf, xf) = smooth(&fine);
            let oc = op_forward(&p, 0.4, &yc, &xc, &coarse).unwrap();
            let of = op_forward(&p, 0.4, &yf, &xf, &fine).unwrap();
            let of_on_coarse: Vec<f64> = coarse
                .points()
                .iter()
                .map(|&s| fine.interpolate(&of, s))
                .collect();
            let num: f64 = oc
                .iter()
                .zip(&of_on_coarse)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let den: f64 = oc.iter().map(|a| a * a).sum();
            assert!((num / den).sqrt() < 0.05, "N={n}: {}", (num / den).sqrt());
        }
    }

    #[test]
    fn schedule_times() {
        let s = NoiseSchedule::default();
        let t = s.times();
        assert_eq!(t.len(), 500);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert!((t[0] - 1e-4).abs() < 1e-8);
        assert!(t[499] > 5.0 && t[499] < 5.1);
        assert!(s.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(NoiseSchedule {
            variance_start: 0.1,
            variance_end: 0.05,
            n_steps: 10
        }
        .validate()
        .is_err());
        let cfg = AdamConfig {
            steps: 1000,
            ..Default::default()
        };
        assert!((cfg.lr(0) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr(1000) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_params_reverse_variance_follows_recursion() {
        let arch = tiny();
        let p = OperatorParams::zeros(arch).unwrap();
        let sched = NoiseSchedule {
            n_steps: 50,
            ..Default::default()
        };
        let g = Grid::uniform((-3.0, 3.0), 12).unwrap();
        let samples = reverse_diffuse(&p, &[0.0; 12], &g, &sched, 4000, 3).unwrap();
        let mut times = vec![0.0];
        times.extend(sched.times());
        let mut v = 1.0;
        for k in (1..times.len()).rev() {
            let h = times[k] - times[k - 1];
            v = (1.0 + 0.5 * h).powi(2) * v + h;
        }
        let all: Vec<f64> = samples.into_iter().flatten().collect();
        let (m, var) = crate::stats::mean_var(&all);
        let se = (2.0 * v * v / all.len() as f64).sqrt();
        assert!(m.abs() < 4.0 * (v / all.len() as f64).sqrt());
        // neighbouring points are independent, so the pooled variance is unbiased
        assert!((var - v).abs() < 4.0 * se, "{var} vs {v}");
        let again = reverse_diffuse(&p, &[0.0; 12], &g, &sched, 10, 3).unwrap();
        assert_eq!(
            again,
            reverse_diffuse(&p, &[0.0; 12], &g, &sched, 10, 3).unwrap()
        );
    }

    struct ZeroTargets {
        rng: StreamRng,
    }

    impl DataSource for ZeroTargets {
        fn batch(&mut self, _step: usize, batch_size: usize) -> Vec<Example> {
            let g = Arc::new(Grid::uniform((-3.0, 3.0), 16).unwrap());
            (0..batch_size)
                .map(|_| Example {
                    t: 0.5,
                    grid: g.clone(),
                    y: (0..16).map(|_| self.rng.standard_normal()).collect(),
                    x: (0..16).map(|_| self.rng.standard_normal()).collect(),
                    target: vec![0.0; 16],
                })
                .collect()
        }
    }

    #[test]
    fn training_on_zero_targets() {
        let p = OperatorParams::init(tiny(), 9).unwrap();
        let cfg = AdamConfig {
            steps: 400,
            batch_size: 8,
            lr_start: 1e-2,
            lr_end: 5e-3,
            ..Default::default()
        };
        let out = train(
            p,
            &mut ZeroTargets {
                rng: StreamRng::seed_from_u64(1),
            },
            &cfg,
        )
        .unwrap();
        let first = out.trajectory[0].loss;
        let last = out.trajectory.last().unwrap().loss;
        assert!(last < 1e-3 * first, "{first} -> {last}");
        // the projection head collapses to the zero map
        assert!(out.params.section("proj2_b").unwrap()[0].abs() < 0.05);
        let g = Grid::uniform((-3.0, 3.0), 23).unwrap();
        let (y, x) = smooth(&g);
        let o = op_forward(&out.params, 1.3, &y, &x, &g).unwrap();
        assert!(o.iter().all(|v| v.abs() < 0.05), "{o:?}");
    }

    #[test]
    fn divergence_is_detected() {
        struct Growing(f64);
        impl DataSource for Growing {
            fn batch(&mut self, _step: usize, _b: usize) -> Vec<Example> {
                self.0 *= 1.1;
                let g = Arc::new(Grid::uniform((-3.0, 3.0), 8).unwrap());
                vec![Example {
                    t: 0.5,
                    grid: g,
                    y: vec![0.0; 8],
                    x: vec![0.0; 8],
                    target: vec![self.0; 8],
                }]
            }
        }
        let p = OperatorParams::zeros(tiny()).unwrap();
        let cfg = AdamConfig {
            steps: 400,
            batch_size: 1,
            ..Default::default()
        };
        match train(p, &mut Growing(1.0), &cfg) {
            Err(Error::Diverged { trajectory, .. }) => assert!(trajectory.len() >= 100),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stylized_data_and_checkpoint_roundtrip() {
        let sched = NoiseSchedule::default();
        let mut data = StylizedData::new(3, &sched, (15, 50), (-3.0, 3.0)).unwrap();
        let nm = data.normalization();
        assert!(
            (nm.x_mean - 2.0).abs() < 0.3 && (nm.x_std - 20.2f64.sqrt()).abs() < 0.4,
            "{nm:?}"
        );
        let b = data.batch(0, 4);
        assert_eq!(b.len(), 4);
        assert!(b
            .iter()
            .all(|e| e.grid.len() >= 15 && e.grid.len() <= 50 && e.x.len() == e.grid.len()));

        let ck = Checkpoint {
            params: OperatorParams::init(tiny(), 2).unwrap(),
            normalization: nm,
            schedule: sched,
        };
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(Checkpoint::from_json(&text.replace("\"version\": 1", "\"version\": 9")).is_err());
    }

    #[test]
    fn stylized_marginal_at_zero_is_exponential() {
        let mut rng = StreamRng::seed_from_u64(5);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| stylized_x0(&[0.0], &mut rng)[0])
            .collect();
        let d =
            crate::stats::ks_one_sample(
                &xs,
                |x| if x < 0.0 { 0.0 } else { 1.0 - (-x / 2.0).exp() },
            );
        assert!(d < crate::stats::ks_critical(1e-3, xs.len(), None));
    }
}
