use std::io::BufWriter;

use hsl_core::dsm::{gaussian_pair_sampler, make_dsm_dataset, write_dataset_csv, LinearScoreModel};
use hsl_core::gaussian_analytic::score_coeffs;

use crate::manifest::{Check, RunManifest};
use crate::table::Table;
use crate::{CliError, Context};

/// `|estimate - truth|` over the larger of `k` standard errors and a relative
/// bias allowance. Zero when both the deviation and the allowance vanish.
fn deviation_ratio(estimate: f64, truth: f64, se: f64, k: f64, bias: f64) -> f64 {
    let dev = (estimate - truth).abs();
    let allowance = (k * se).max(bias * truth.abs());
    if dev == 0.0 {
        0.0
    } else {
        dev / allowance
    }
}

pub fn dsm_linear(ctx: &Context, manifest: &mut RunManifest) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dc = &cfg.dsm;
    let p = cfg.problem.build()?;
    let sampler = gaussian_pair_sampler(&p);
    let data = make_dsm_dataset(
        &p,
        &sampler,
        dc.n_samples,
        dc.t_floor,
        ctx.derive_seed("dsm-linear"),
    )?;
    if dc.export_dataset {
        let path = ctx.path("dsm_dataset.csv");
        let file = std::fs::File::create(&path)?;
        write_dataset_csv(&data, BufWriter::new(file))?;
        manifest.record_output(&path);
    }
    let model = match LinearScoreModel::fit(&data, dc.t_floor, p.horizon(), dc.bins) {
        Ok(m) => m,
        Err(e) => {
            manifest.push(Check::failed("bins_filled", e.to_string()));
            return Err(e.into());
        }
    };

    let mut table = Table::new(&[
        "mode", "bin", "t_lo", "t_hi", "t_mid", "n", "a_hat", "b_hat", "a_true", "b_true",
        "a_stderr", "b_stderr", "a_dev", "b_dev",
    ]);
    let (mut worst, mut worst_z) = (0.0f64, 0.0f64);
    for bin in 0..model.n_bins() {
        let mid = model.bin_midpoint(bin);
        let truth = score_coeffs(&p, mid)?;
        for m in 0..p.dim() {
            let f = model.fit_at(bin, m);
            let a_dev = deviation_ratio(f.a, truth.a[m], f.a_se, dc.stderrs, dc.bias_allowance);
            let b_dev = deviation_ratio(f.b, truth.b[m], f.b_se, dc.stderrs, dc.bias_allowance);
            worst = worst.max(a_dev).max(b_dev);
            for (est, tr, se) in [(f.a, truth.a[m], f.a_se), (f.b, truth.b[m], f.b_se)] {
                if se > 0.0 {
                    worst_z = worst_z.max((est - tr).abs() / se);
                }
            }
            table.push(vec![
                m.into(),
                bin.into(),
                model.edges()[bin].into(),
                model.edges()[bin + 1].into(),
                mid.into(),
                f.n.into(),
                f.a.into(),
                f.b.into(),
                truth.a[m].into(),
                truth.b[m].into(),
                f.a_se.into(),
                f.b_se.into(),
                a_dev.into(),
                b_dev.into(),
            ]);
        }
    }
    table.save(ctx, manifest, "dsm_fit")?;
    manifest.push(Check::at_most(
        "linear_fit",
        worst,
        1.0,
        format!(
            "largest |fit - score_coeffs(midpoint)| / max({} stderr, {} relative bin bias); max standardized deviation {worst_z:.3}",
            dc.stderrs, dc.bias_allowance
        ),
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::deviation_ratio;

    #[test]
    fn allowance_is_the_larger_of_noise_and_bias() {
        assert!((deviation_ratio(1.01, 1.0, 0.001, 3.0, 0.02) - 0.5).abs() < 1e-9);
        assert!((deviation_ratio(1.01, 1.0, 0.01, 3.0, 0.02) - 0.01 / 0.03).abs() < 1e-12);
        assert_eq!(deviation_ratio(0.0, 0.0, 0.0, 3.0, 0.02), 0.0);
        assert!(deviation_ratio(0.1, 0.0, 0.0, 3.0, 0.02).is_infinite());
    }
}
