use std::sync::Arc;

use hsl_core::gaussian_analytic::score_coeffs;
use hsl_core::score_oracle::{
    oracle_score, GaussianMixture, MixtureWeight, QuadratureSpec, SeparablePrior, SinusoidalWeight,
};
use hsl_core::{CovarianceSpectrum, Error, ObservationModel, ProblemSpec};

use crate::config::OraclePrior;
use crate::manifest::{Check, RunManifest};
use crate::table::Table;
use crate::{CliError, Context};

type ReferenceScore = Box<dyn Fn(f64, f64) -> hsl_core::Result<f64>>;

/// Mode `m` of `p` as a one-mode problem.
fn single_mode(p: &ProblemSpec, m: usize) -> hsl_core::Result<ProblemSpec> {
    let obs = match p.noise_std(m) {
        Some(s) => ObservationModel::with_noise(vec![0], vec![s])?,
        None => ObservationModel::none(),
    };
    ProblemSpec::new(
        CovarianceSpectrum::new(vec![p.prior().get(m)])?,
        CovarianceSpectrum::new(vec![p.diffusion().get(m)])?,
        obs,
        p.horizon(),
    )
}

pub fn oracle_compare(ctx: &Context, manifest: &mut RunManifest) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let oc = &cfg.oracle;
    let p = cfg.problem.build()?;
    let y = cfg.problem.observation(&p)?;
    let quad = QuadratureSpec::new(oc.n_nodes, oc.half_width)?;
    let n_lat = oc.lattice_points.max(2);
    let lattice: Vec<f64> = (0..n_lat)
        .map(|i| oc.lattice_min + (oc.lattice_max - oc.lattice_min) * i as f64 / (n_lat - 1) as f64)
        .collect();

    let mut table = Table::new(&[
        "prior",
        "mode",
        "t",
        "x",
        "y",
        "oracle",
        "reference",
        "abs_error",
    ]);
    for prior_kind in &oc.priors {
        let (label, name, tol) = match prior_kind {
            OraclePrior::Gaussian => ("gaussian", "oracle_vs_gaussian", oc.gaussian_tol),
            OraclePrior::Mixture => ("mixture", "oracle_vs_mixture", oc.mixture_tol),
            OraclePrior::Sinusoidal => (
                "sinusoidal",
                "oracle_refinement_sinusoidal",
                oc.refinement_tol,
            ),
        };
        let mut worst: f64 = 0.0;
        let mut rows = Vec::new();
        let outcome: hsl_core::Result<()> = (|| {
            for m in 0..p.dim() {
                let sd = p.prior().get(m).sqrt();
                let yj = y[m];
                // (problem, prior, mode index inside that problem, reference score)
                let case: (ProblemSpec, SeparablePrior, usize, ReferenceScore) = match prior_kind {
                    OraclePrior::Gaussian => {
                        let pc = p.clone();
                        let reference = move |t: f64, x: f64| {
                            let c = score_coeffs(&pc, t)?;
                            Ok(c.a[m] * x + c.b[m] * yj)
                        };
                        (
                            p.clone(),
                            SeparablePrior::gaussian(),
                            m,
                            Box::new(reference),
                        )
                    }
                    OraclePrior::Mixture => {
                        let p1 = single_mode(&p, m)?;
                        let centre = if p1.is_observed(0) {
                            p1.shrink(0) * yj
                        } else {
                            0.0
                        };
                        let pv = p1.posterior_var(0);
                        let comps = oc
                            .mixture
                            .iter()
                            .map(|&(w, mu, v)| (w, centre + mu * pv.sqrt(), v * pv))
                            .collect();
                        let mix = GaussianMixture::new(comps)?;
                        let weight = MixtureWeight::new(&p1, mix.clone())?;
                        let lam = p1.diffusion().get(0);
                        let reference = move |t: f64, x: f64| {
                            let mean = mix.conditional_mean(t, lam, x);
                            Ok(-(x - (-0.5 * t).exp() * mean) / -(-t).exp_m1())
                        };
                        // the reweighted density is unbounded, so K and L are nominal
                        (
                            p1,
                            SeparablePrior::new(Arc::new(weight), 1.0, 0.0)?,
                            0,
                            Box::new(reference),
                        )
                    }
                    OraclePrior::Sinusoidal => {
                        let prior = SeparablePrior::new(
                            Arc::new(SinusoidalWeight::new(oc.psi_k, oc.psi_l)?),
                            oc.psi_k,
                            oc.psi_l,
                        )?;
                        let xs: Vec<f64> = lattice.iter().map(|u| u * sd).collect();
                        prior.spot_check(p.dim(), &xs, &[yj])?;
                        let fine = QuadratureSpec::new(2 * oc.n_nodes - 1, oc.half_width)?;
                        let (pc, pr) = (p.clone(), prior.clone());
                        let reference =
                            move |t: f64, x: f64| oracle_score(&pc, &pr, m, t, x, yj, &fine);
                        (p.clone(), prior, m, Box::new(reference))
                    }
                };
                let (problem, prior, mode, reference) = case;
                for &t in &oc.t_values {
                    for &u in &lattice {
                        let x = u * sd;
                        let got = oracle_score(&problem, &prior, mode, t, x, yj, &quad)?;
                        let want = reference(t, x)?;
                        let err = (got - want).abs();
                        worst = worst.max(err);
                        rows.push((m, t, x, yj, got, want, err));
                    }
                }
            }
            Ok(())
        })();
        for (m, t, x, yj, got, want, err) in rows {
            table.push(vec![
                label.into(),
                m.into(),
                t.into(),
                x.into(),
                yj.into(),
                got.into(),
                want.into(),
                err.into(),
            ]);
        }
        match outcome {
            Ok(()) => manifest.push(Check::at_most(
                name,
                worst,
                tol,
                format!("largest |oracle - reference| score over the {label} lattice"),
            )),
            Err(Error::NotApplicable(reason)) => manifest.push(Check::not_applicable(name, reason)),
            Err(e) => manifest.push(Check::failed(name, e.to_string())),
        }
    }
    table.save(ctx, manifest, "oracle_compare")?;
    Ok(())
}
