use hsl_core::gaussian_analytic::prop3_bound;
use hsl_core::gaussian_analytic::{
    exact_start_moments, posterior_moments, reverse_moments, score_norm_expected, ModeMoments,
    ScoreNormVariant,
};
use hsl_core::sde::{empirical_moments, ensemble_sample, AnalyticScore};
use hsl_core::stats::ols_slope;
use hsl_core::Error;

use crate::manifest::{Check, RunManifest};
use crate::table::Table;
use crate::{CliError, Context};

pub fn verify_gaussian(ctx: &Context, manifest: &mut RunManifest) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let p = cfg.problem.build()?;
    let y = cfg.problem.observation(&p)?;
    let exact = posterior_moments(&p, &y)?;

    // exact-start fixed point
    let fixed = reverse_moments(&p, &y, &exact_start_moments(&p, &y)?)?;
    manifest.push(Check::at_most(
        "exact_start_fixed_point",
        fixed.max_abs_diff(&exact),
        cfg.checks.fixed_point_tol,
        "max |moment difference| after reverse evolution of the exact start",
    ));

    // convergence from the invariant start
    let mut conv = Table::new(&["horizon", "mean_error", "variance_error", "error"]);
    let (mut horizons, mut log_err) = (Vec::new(), Vec::new());
    let invariant = ModeMoments {
        mean: vec![0.0; p.dim()].into(),
        variance: p.diffusion().eigenvalues().to_vec(),
    };
    for &horizon in &cfg.sde.horizons {
        let ph = p.with_horizon(horizon)?;
        let got = reverse_moments(&ph, &y, &invariant)?;
        let mean_err = got
            .mean
            .iter()
            .zip(exact.mean.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let var_err = got
            .variance
            .iter()
            .zip(&exact.variance)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let err = got.l2_diff(&exact);
        conv.push(vec![
            horizon.into(),
            mean_err.into(),
            var_err.into(),
            err.into(),
        ]);
        if err > 0.0 {
            horizons.push(horizon);
            log_err.push(err.ln());
        }
    }
    conv.save(ctx, manifest, "convergence")?;
    if horizons.len() >= 2 {
        manifest.push(Check::at_most(
            "convergence_slope",
            ols_slope(&horizons, &log_err),
            cfg.checks.max_convergence_slope,
            "least-squares slope of ln(moment error) against T, invariant start",
        ));
    } else {
        manifest.push(Check::failed(
            "convergence_slope",
            "need at least two horizons with nonzero error",
        ));
    }

    // uniform score bound for the psi = 1 member of the bounded class
    if cfg.checks.prop3 {
        match prop3_bound(&p, 1.0, 0.0) {
            Ok(bound) => {
                let mut worst: f64 = 0.0;
                for &t in &cfg.score_norm.t_values {
                    worst = worst.max(score_norm_expected(&p, t, ScoreNormVariant::Conditional)?);
                }
                manifest.push(Check::at_most(
                    "prop3_bound",
                    worst,
                    bound,
                    "largest analytic score norm on the score_norm t grid vs the uniform bound (K = 1, L = 0)",
                ));
            }
            Err(Error::NotApplicable(_)) => {
                manifest.push(Check::not_applicable("prop3_bound", "noiseless regime"))
            }
            Err(e) => return Err(e.into()),
        }
    }

    // posterior sampling with the analytic score from the exact start
    let score = AnalyticScore::new(p.clone(), cfg.sde.t_floor)?;
    let samples = ensemble_sample(
        &p,
        &score,
        &y,
        cfg.sde.n_paths,
        cfg.sde.steps,
        ctx.derive_seed("posterior-sampling"),
    )?;
    let emp = empirical_moments(&samples)?;
    let n = samples.len() as f64;
    let mut table = Table::new(&[
        "mode",
        "observed",
        "y",
        "mean_exact",
        "variance_exact",
        "mean_empirical",
        "variance_empirical",
        "mean_stderr",
        "mean_z",
        "variance_rel_error",
    ]);
    let (mut worst_z, mut worst_rel) = (0.0f64, 0.0f64);
    for m in 0..p.dim() {
        let se = (emp.variance[m] / n).sqrt();
        let dev = emp.mean[m] - exact.mean[m];
        let z = if se > 0.0 {
            dev.abs() / se
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        // pinned modes have zero target variance; measure against the prior's
        let scale = if exact.variance[m] > 0.0 {
            exact.variance[m]
        } else {
            p.prior().get(m)
        };
        let rel = (emp.variance[m] - exact.variance[m]).abs() / scale;
        worst_z = worst_z.max(z);
        worst_rel = worst_rel.max(rel);
        table.push(vec![
            m.into(),
            p.is_observed(m).into(),
            y[m].into(),
            exact.mean[m].into(),
            exact.variance[m].into(),
            emp.mean[m].into(),
            emp.variance[m].into(),
            se.into(),
            z.into(),
            rel.into(),
        ]);
    }
    table.save(ctx, manifest, "posterior_moments")?;
    manifest.push(Check::at_most(
        "posterior_mean",
        worst_z,
        cfg.checks.mean_stderrs,
        "largest |empirical - exact| posterior mean in standard errors",
    ));
    manifest.push(Check::at_most(
        "posterior_variance",
        worst_rel,
        cfg.checks.var_rel_tol,
        "largest relative error of the empirical posterior variance",
    ));
    Ok(())
}
