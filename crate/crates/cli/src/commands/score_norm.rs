use std::sync::Arc;

use hsl_core::gaussian_analytic::{
    crude_bound, prop3_bound, score_norm_expected, ScoreNormVariant,
};
use hsl_core::rng::substream;
use hsl_core::score_oracle::{
    mc_gaussian_score_norm, mc_score_norm, QuadratureSpec, SeparablePrior, SinusoidalWeight,
};
use hsl_core::stats::ols_slope;
use hsl_core::{Error, ObservationModel, ProblemSpec};

use crate::manifest::{Check, RunManifest};
use crate::table::{Cell, Table};
use crate::{CliError, Context};

fn optional(r: hsl_core::Result<f64>) -> Result<Option<f64>, CliError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NotApplicable(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn score_norm(ctx: &Context, manifest: &mut RunManifest) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let sn = &cfg.score_norm;
    let p = cfg.problem.build()?;
    let y = cfg.problem.observation(&p)?;
    let noiseless = ProblemSpec::new(
        p.prior().clone(),
        p.diffusion().clone(),
        ObservationModel::isotropic(p.obs().indices().to_vec(), 0.0)?,
        p.horizon(),
    )?;
    let unconditional = p.unconditional();

    let mut table = Table::new(&[
        "variant",
        "t",
        "analytic",
        "crude_bound",
        "prop3_bound",
        "monte_carlo",
        "stderr",
    ]);
    let gaussian_bound = optional(prop3_bound(&p, 1.0, 0.0))?;
    let variants: [(&str, &ProblemSpec, ScoreNormVariant, Option<f64>); 3] = [
        (
            "conditional",
            &p,
            ScoreNormVariant::Conditional,
            gaussian_bound,
        ),
        ("noiseless", &noiseless, ScoreNormVariant::Conditional, None),
        (
            "unconditional",
            &unconditional,
            ScoreNormVariant::Conditional,
            optional(prop3_bound(&unconditional, 1.0, 0.0))?,
        ),
    ];
    let (mut worst_rel, mut worst_z) = (0.0f64, 0.0f64);
    let mut worst_crude = f64::NEG_INFINITY;
    let mut worst_prop3 = f64::NEG_INFINITY;
    for (vi, (name, spec, variant, bound)) in variants.iter().enumerate() {
        for (ti, &t) in sn.t_values.iter().enumerate() {
            let analytic = score_norm_expected(spec, t, *variant)?;
            let crude = crude_bound(spec, t)?;
            let seed = ctx.derive_seed(&format!("score-norm/{vi}/{ti}"));
            let mc = mc_gaussian_score_norm(spec, &y, t, sn.mc_samples, seed)?;
            worst_rel = worst_rel.max((mc.value - analytic).abs() / analytic);
            worst_z = worst_z.max((mc.value - analytic).abs() / mc.stderr);
            worst_crude = worst_crude.max(analytic.max(mc.value) / crude);
            if let Some(b) = bound {
                worst_prop3 = worst_prop3.max(analytic / b);
            }
            table.push(vec![
                (*name).into(),
                t.into(),
                analytic.into(),
                crude.into(),
                (*bound).into(),
                mc.value.into(),
                mc.stderr.into(),
            ]);
        }
    }
    manifest.push(Check::at_most(
        "monte_carlo_relative",
        worst_rel,
        sn.mc_rel_tol,
        "largest relative gap between Monte Carlo and analytic score norms, Gaussian variants",
    ));
    manifest.push(Check::at_most(
        "monte_carlo_stderr",
        worst_z,
        3.0,
        "largest gap between Monte Carlo and analytic score norms in standard errors",
    ));

    // C = C_mu collapses the unconditional norm to the trace at every t
    if p.prior() == p.diffusion() {
        let trace = p.diffusion().trace();
        let mut worst: f64 = 0.0;
        for &t in &sn.t_values {
            let v = score_norm_expected(&unconditional, t, ScoreNormVariant::Conditional)?;
            worst = worst.max((v - trace).abs() / trace);
        }
        manifest.push(Check::at_most(
            "unconditional_trace",
            worst,
            1e-12,
            "relative gap between the unconditional score norm and the trace of C",
        ));
    } else {
        manifest.push(Check::not_applicable(
            "unconditional_trace",
            "diffusion covariance differs from the prior",
        ));
    }

    // noiseless blow-up
    if p.obs().is_empty() {
        manifest.push(Check::not_applicable(
            "noiseless_blowup_slope",
            "no observed modes",
        ));
        manifest.push(Check::not_applicable(
            "noiseless_limit",
            "no observed modes",
        ));
    } else {
        let k = sn.blowup_points.max(2);
        let (lo, hi) = (sn.blowup_t_min.ln(), sn.blowup_t_max.ln());
        let mut xs = Vec::with_capacity(k);
        let mut ys = Vec::with_capacity(k);
        for i in 0..k {
            let lt = lo + (hi - lo) * i as f64 / (k - 1) as f64;
            xs.push(lt);
            ys.push(score_norm_expected(&noiseless, lt.exp(), ScoreNormVariant::Conditional)?.ln());
        }
        let slope = ols_slope(&xs, &ys);
        manifest.push(Check::at_most(
            "noiseless_blowup_slope",
            (slope + 1.0).abs(),
            sn.blowup_slope_tol,
            format!(
                "|slope + 1| for the log-log fit of the noiseless score norm; slope = {slope:.6}"
            ),
        ));
        let observed_trace: f64 = p
            .obs()
            .indices()
            .iter()
            .map(|&m| p.diffusion().get(m))
            .sum();
        let limit = sn.limit_t
            * score_norm_expected(&noiseless, sn.limit_t, ScoreNormVariant::Conditional)?;
        manifest.push(Check::at_most(
            "noiseless_limit",
            (limit - observed_trace).abs() / observed_trace,
            sn.limit_rel_tol,
            format!(
                "relative gap between t * norm at t = {:e} and the observed-mode trace",
                sn.limit_t
            ),
        ));
    }

    // bounded-Lipschitz test prior
    match (
        prop3_bound(&p, sn.psi_k, sn.psi_l),
        SinusoidalWeight::new(sn.psi_k, sn.psi_l),
    ) {
        (Ok(bound), Ok(weight)) => {
            let prior = SeparablePrior::new(Arc::new(weight), sn.psi_k, sn.psi_l)?;
            let quad = QuadratureSpec::default();
            let mut worst_psi = f64::NEG_INFINITY;
            for (ti, &t) in sn.psi_t_values.iter().enumerate() {
                let crude = crude_bound(&p, t)?;
                let mut rng = substream(ctx.derive_seed("score-norm/psi"), ti as u64);
                let mc = mc_score_norm(&p, &prior, &y, t, sn.psi_samples, &quad, &mut rng)?;
                worst_crude = worst_crude.max(mc.value / crude);
                worst_psi = worst_psi.max(mc.value / bound);
                table.push(vec![
                    "psi".into(),
                    t.into(),
                    Cell::Empty,
                    crude.into(),
                    bound.into(),
                    mc.value.into(),
                    mc.stderr.into(),
                ]);
            }
            manifest.push(Check::at_most(
                "psi_prop3_bound",
                worst_psi,
                1.0,
                format!("largest Monte Carlo score norm / uniform bound for the K = {}, L = {} test prior", sn.psi_k, sn.psi_l),
            ));
        }
        (Err(Error::NotApplicable(_)), _) => {
            manifest.push(Check::not_applicable("psi_prop3_bound", "noiseless regime"));
        }
        (Err(e), _) | (_, Err(e)) => return Err(e.into()),
    }

    manifest.push(Check::at_most(
        "crude_bound",
        worst_crude,
        1.0,
        "largest analytic or Monte Carlo score norm / Tr(C)/(1 - e^-t)",
    ));
    match gaussian_bound {
        Some(_) => manifest.push(Check::at_most(
            "gaussian_prop3_bound",
            worst_prop3,
            1.0,
            "largest analytic score norm / uniform bound with K = 1, L = 0",
        )),
        None => manifest.push(Check::not_applicable(
            "gaussian_prop3_bound",
            "noiseless regime",
        )),
    }
    table.save(ctx, manifest, "score_norm")?;
    Ok(())
}
