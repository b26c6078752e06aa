use std::collections::BTreeSet;
use std::path::PathBuf;

use hsl_core::neural_op::{
    sample_stylized as run_sampler, train, Checkpoint, OperatorParams, StylizedData,
};
use hsl_core::stats::{
    histogram, kde, ks_critical, ks_two_sample, significant_modes, silverman_bandwidth,
};
use hsl_core::{Error, Grid};

use crate::manifest::{Check, RunManifest};
use crate::table::{Cell, Table};
use crate::{CliError, Context};

/// Loss of the all-zero operator: the mean square of standard normal targets.
const ZERO_MODEL_LOSS: f64 = 1.0;

fn checkpoint_path(ctx: &Context) -> PathBuf {
    ctx.config
        .train
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.path("checkpoint.json"))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn train_stylized(ctx: &Context, manifest: &mut RunManifest) -> Result<(), CliError> {
    let tc = &ctx.config.train;
    let mut data = StylizedData::new(
        ctx.derive_seed("train/data"),
        &tc.schedule,
        (tc.grid_min_points, tc.grid_max_points),
        tc.domain,
    )?;
    let params = OperatorParams::init(tc.arch, ctx.derive_seed("train/init"))?;
    let result = train(params, &mut data, &tc.optimizer);

    let (losses, outcome) = match result {
        Ok(out) => (
            out.trajectory.iter().map(|s| s.loss).collect::<Vec<_>>(),
            Ok(out.params),
        ),
        Err(Error::Diverged {
            step,
            loss,
            trajectory,
        }) => (
            trajectory.clone(),
            Err(Error::Diverged {
                step,
                loss,
                trajectory,
            }),
        ),
        Err(e) => return Err(e.into()),
    };
    let mut table = Table::new(&["step", "loss", "lr"]);
    for (k, loss) in losses.iter().enumerate() {
        table.push(vec![k.into(), (*loss).into(), tc.optimizer.lr(k).into()]);
    }
    table.save(ctx, manifest, "loss")?;
    let params = outcome?;

    let ckpt = Checkpoint {
        params,
        normalization: data.normalization(),
        schedule: tc.schedule,
    };
    let path = checkpoint_path(ctx);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ckpt.save(&path)?;
    manifest.record_output(&path);

    let window = (losses.len() / 10).max(1);
    let head = median(&losses[..window]);
    let tail = median(&losses[losses.len() - window..]);
    manifest.push(Check::at_most(
        "loss_trend",
        tail / head,
        1.0,
        "median loss over the last tenth of training / median over the first tenth",
    ));
    manifest.push(Check::at_least(
        "loss_below_zero_model",
        ZERO_MODEL_LOSS / tail,
        10.0,
        format!("zero-model loss {ZERO_MODEL_LOSS} / final median loss {tail:.5}"),
    ));
    Ok(())
}

/// Index of the grid point nearest to `s`; ties go to the smaller index.
fn nearest(grid: &Grid, s: f64) -> usize {
    let pts = grid.points();
    (0..pts.len())
        .min_by(|&a, &b| (pts[a] - s).abs().total_cmp(&(pts[b] - s).abs()))
        .expect("grid is nonempty")
}

/// Uniform grid on `domain` with the nearest interior point moved onto each
/// of `targets`, so marginals are read off at exactly those locations.
fn grid_through(domain: (f64, f64), n: usize, targets: &[f64]) -> hsl_core::Result<Grid> {
    let mut pts = Grid::uniform(domain, n)?.points().to_vec();
    for &t in targets {
        if !(t > domain.0 && t < domain.1) || n < 3 {
            continue;
        }
        let j = (1..n - 1)
            .min_by(|&a, &b| (pts[a] - t).abs().total_cmp(&(pts[b] - t).abs()))
            .expect("n >= 3");
        if pts[j - 1] < t && t < pts[j + 1] {
            pts[j] = t;
        }
    }
    Grid::new(pts, domain)
}

struct GridSamples {
    n: usize,
    grid: Grid,
    /// `marginals[k]`: values at the grid point nearest to `y_values[k]`.
    marginals: Vec<Vec<f64>>,
}

pub fn sample_stylized(ctx: &Context, manifest: &mut RunManifest) -> Result<(), CliError> {
    let sc = &ctx.config.sample;
    let domain = ctx.config.train.domain;
    let path = checkpoint_path(ctx);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "missing checkpoint {}; run train-stylized first",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(&path)?;

    let sizes: BTreeSet<usize> = sc
        .grid_sizes
        .iter()
        .chain(&sc.extrapolation_sizes)
        .chain(std::iter::once(&sc.reference_size))
        .copied()
        .collect();
    let mut runs = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let grid = grid_through(domain, n, &sc.y_values)?;
        let samples = run_sampler(
            &ckpt,
            &grid,
            sc.n_samples,
            ctx.derive_seed(&format!("sample/N{n}")),
        )?;
        let mut table = Table::new(&["sample", "point", "s", "x"]);
        for (i, v) in samples.iter().enumerate() {
            for (j, (s, x)) in grid.points().iter().zip(v).enumerate() {
                table.push(vec![i.into(), j.into(), (*s).into(), (*x).into()]);
            }
        }
        table.save(ctx, manifest, &format!("samples_N{n}"))?;
        let marginals = sc
            .y_values
            .iter()
            .map(|&yv| {
                let j = nearest(&grid, yv);
                samples.iter().map(|v| v[j]).collect()
            })
            .collect();
        runs.push(GridSamples { n, grid, marginals });
    }

    // shared evaluation range per y so densities overlay across grid sizes
    let mut ranges = Vec::with_capacity(sc.y_values.len());
    for k in 0..sc.y_values.len() {
        let (mut lo, mut hi, mut bw) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        for r in &runs {
            for &x in &r.marginals[k] {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            bw = bw.max(silverman_bandwidth(&r.marginals[k]));
        }
        ranges.push((lo - 3.0 * bw, hi + 3.0 * bw));
    }

    let mut min_modes = vec![usize::MAX; sc.y_values.len()];
    for r in &runs {
        let mut table = Table::new(&["y", "s", "estimator", "x", "density", "bandwidth"]);
        for (k, &yv) in sc.y_values.iter().enumerate() {
            let xs = &r.marginals[k];
            let s = r.grid.points()[nearest(&r.grid, yv)];
            let (lo, hi) = ranges[k];
            let m = sc.density_points.max(2);
            let at: Vec<f64> = (0..m)
                .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
                .collect();
            let bw = silverman_bandwidth(xs);
            let dens = kde(xs, bw, &at);
            for (x, d) in at.iter().zip(&dens) {
                table.push(vec![
                    yv.into(),
                    s.into(),
                    "kde".into(),
                    (*x).into(),
                    (*d).into(),
                    bw.into(),
                ]);
            }
            let bins = sc.histogram_bins.max(1);
            let width = (hi - lo) / bins as f64;
            for (b, d) in histogram(xs, lo, hi, bins).iter().enumerate() {
                let centre = lo + width * (b as f64 + 0.5);
                table.push(vec![
                    yv.into(),
                    s.into(),
                    "histogram".into(),
                    centre.into(),
                    (*d).into(),
                    Cell::Empty,
                ]);
            }
            if sc.grid_sizes.contains(&r.n) {
                min_modes[k] =
                    min_modes[k].min(significant_modes(&at, &dens, sc.min_prominence).len());
            }
        }
        table.save(ctx, manifest, &format!("marginals_N{}", r.n))?;
    }

    let by_size = |n: usize| {
        runs.iter()
            .find(|r| r.n == n)
            .expect("every requested size was sampled")
    };
    let critical = ks_critical(sc.ks_alpha, sc.n_samples, Some(sc.n_samples));
    for (k, &yv) in sc.y_values.iter().enumerate() {
        if !sc.grid_sizes.is_empty() {
            manifest.push(Check::at_least(
                format!("bimodal_y={yv}"),
                min_modes[k] as f64,
                2.0,
                format!(
                    "fewest significant KDE modes (prominence >= {} of peak) across grid sizes {:?}",
                    sc.min_prominence, sc.grid_sizes
                ),
            ));
        }
        let mut worst: f64 = 0.0;
        for (i, &a) in sc.grid_sizes.iter().enumerate() {
            for &b in &sc.grid_sizes[i + 1..] {
                worst = worst.max(ks_two_sample(
                    &by_size(a).marginals[k],
                    &by_size(b).marginals[k],
                ));
            }
        }
        if sc.grid_sizes.len() >= 2 {
            manifest.push(Check::at_most(
                format!("ks_cross_grid_y={yv}"),
                worst,
                critical,
                format!(
                    "largest pairwise two-sample KS statistic; threshold at alpha = {}",
                    sc.ks_alpha
                ),
            ));
        }
        for &n in &sc.extrapolation_sizes {
            let stat = ks_two_sample(
                &by_size(n).marginals[k],
                &by_size(sc.reference_size).marginals[k],
            );
            manifest.push(Check::at_most(
                format!("ks_extrapolation_N{n}_y={yv}"),
                stat,
                critical,
                format!("two-sample KS statistic against N = {}", sc.reference_size),
            ));
        }
    }
    Ok(())
}
