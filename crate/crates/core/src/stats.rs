//! Small empirical-statistics toolkit.

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic KS rejection threshold `c(alpha) * sqrt((n + m) / (n m))`,
/// `c(alpha) = sqrt(-ln(alpha / 2) / 2)`. Use `m = None` for the one-sample test.
pub fn ks_critical(alpha: f64, n: usize, m: Option<usize>) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    match m {
        Some(m) => c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt(),
        None => c / (n as f64).sqrt(),
    }
}

/// Silverman's rule-of-thumb bandwidth `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let (_, var) = mean_var(samples);
    let sd = var.sqrt();
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&xs, 0.75) - quantile_sorted(&xs, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

/// Gaussian kernel density estimate evaluated at `at`.
pub fn kde(samples: &[f64], bandwidth: f64, at: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    at.iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|s| {
                    let u = (x - s) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect()
}

/// Density-normalized histogram over `[lo, hi)` with `bins` bins.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &s in samples {
        if s >= lo && s < hi {
            let k = (((s - lo) / width) as usize).min(bins - 1);
            counts[k] += 1.0;
        }
    }
    let scale = 1.0 / (samples.len() as f64 * width);
    counts.iter_mut().for_each(|c| *c *= scale);
    counts
}

/// Local maxima of a sampled density whose prominence (height above the
/// higher of the two surrounding minima) is at least `min_prominence` times
/// the global maximum.
pub fn significant_modes(xs: &[f64], density: &[f64], min_prominence: f64) -> Vec<f64> {
    let n = density.len();
    let peak = density.iter().cloned().fold(0.0, f64::max);
    let mut modes = Vec::new();
    for i in 0..n {
        let left = if i == 0 {
            f64::NEG_INFINITY
        } else {
            density[i - 1]
        };
        let right = if i + 1 == n {
            f64::NEG_INFINITY
        } else {
            density[i + 1]
        };
        if !(density[i] > left && density[i] >= right) {
            continue;
        }
        // lowest point on the way to higher ground, per side
        let (mut lmin, mut k) = (density[i], i);
        while k > 0 && density[k - 1] <= density[i] {
            k -= 1;
            lmin = lmin.min(density[k]);
        }
        let left_higher = k > 0;
        let (mut rmin, mut k) = (density[i], i);
        while k + 1 < n && density[k + 1] <= density[i] {
            k += 1;
            rmin = rmin.min(density[k]);
        }
        let right_higher = k + 1 < n;
        let col = match (left_higher, right_higher) {
            (true, true) => lmin.max(rmin),
            (true, false) => lmin,
            (false, true) => rmin,
            (false, false) => 0.0,
        };
        let prominence = density[i] - col;
        if prominence >= min_prominence * peak {
            modes.push(xs[i]);
        }
    }
    modes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        assert!((ols_slope(&x, &y) + 2.0).abs() < 1e-14);
    }

    #[test]
    fn ks_two_sample_extremes() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        let b: Vec<f64> = (0..100).map(|i| 1000.0 + i as f64).collect();
        assert_eq!(ks_two_sample(&a, &b), 1.0);
        let c: Vec<f64> = (0..100).map(|i| i as f64 + 50.0).collect();
        assert!((ks_two_sample(&a, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ks_critical_value() {
        // c(0.001) = 1.9495
        let d = ks_critical(1e-3, 2000, Some(2000));
        assert!((d - 1.9495 * (2.0f64 / 2000.0).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn one_sample_ks_of_uniform_grid() {
        let xs: Vec<f64> = (0..10).map(|i| (i as f64 + 0.5) / 10.0).collect();
        assert!((ks_one_sample(&xs, |x| x) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn mode_detection() {
        let xs: Vec<f64> = (0..401).map(|i| -4.0 + 0.02 * i as f64).collect();
        let bump = |c: f64, x: f64| (-(x - c) * (x - c) / 0.1).exp();
        let two: Vec<f64> = xs
            .iter()
            .map(|&x| bump(-1.5, x) + 0.6 * bump(1.5, x))
            .collect();
        assert_eq!(significant_modes(&xs, &two, 0.05).len(), 2);
        let one: Vec<f64> = xs.iter().map(|&x| bump(0.0, x)).collect();
        assert_eq!(significant_modes(&xs, &one, 0.05).len(), 1);
        // a shallow shoulder is not a mode
        let shoulder: Vec<f64> = xs
            .iter()
            .map(|&x| bump(0.0, x) + 0.01 * bump(2.0, x))
            .collect();
        assert_eq!(significant_modes(&xs, &shoulder, 0.05).len(), 1);
    }

    #[test]
    fn kde_integrates_to_one() {
        let s = [-1.0, 0.0, 0.5, 2.0];
        let xs: Vec<f64> = (0..2001).map(|i| -10.0 + 0.01 * i as f64).collect();
        let f = kde(&s, 0.4, &xs);
        let total: f64 = f.iter().sum::<f64>() * 0.01;
        assert!((total - 1.0).abs() < 1e-6);
        let h = histogram(&s, -2.0, 3.0, 5);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
