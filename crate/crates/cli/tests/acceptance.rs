//! Acceptance battery. Prints one PASS/FAIL line per criterion.
//!
//! Runs the `hsl` binary on generated configs, so it exercises the whole
//! pipeline from TOML to manifest. Exits nonzero when a criterion fails that
//! is not listed in `KNOWN_FAILURES`, or when a listed one starts passing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hsl_cli::{CheckStatus, ExperimentConfig, RunManifest};
use hsl_core::neural_op::{
    op_backward, op_loss, DataSource, NoiseSchedule, OperatorArch, OperatorParams, StylizedData,
};
use hsl_core::rng::substream;
use rand::Rng;

/// Criteria that cannot hold for the stylized data as specified; see README.
const KNOWN_FAILURES: &[u32] = &[10];

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        summary: summary.into(),
    }
}

struct Run {
    manifest: RunManifest,
    dir: PathBuf,
    elapsed: Duration,
    code: i32,
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn hsl(subcommand: &str, config: &Path, out: &Path, threads: usize) -> Run {
    let started = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_hsl"))
        .arg(subcommand)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .env_remove("HSL_OUT")
        .status()
        .expect("hsl binary runs");
    let elapsed = started.elapsed();
    let manifest =
        RunManifest::read(&out.join(RunManifest::file_name(subcommand))).expect("manifest written");
    Run {
        manifest,
        dir: out.to_path_buf(),
        elapsed,
        code: status.code().unwrap_or(-1),
    }
}

fn check(run: &Run, name: &str) -> (bool, String) {
    match run.manifest.check(name) {
        Some(c) => (
            c.status == CheckStatus::Pass,
            format!(
                "{name} {} (measured {}, tolerance {})",
                match c.status {
                    CheckStatus::Pass => "pass",
                    CheckStatus::Fail => "fail",
                    CheckStatus::NotApplicable => "n/a",
                },
                c.measured.map_or("-".into(), |v| format!("{v:.4e}")),
                c.tolerance.map_or("-".into(), |v| format!("{v:.4e}")),
            ),
        ),
        None => (
            false,
            format!(
                "{name} missing{}",
                run.manifest
                    .error
                    .as_ref()
                    .map_or(String::new(), |e| format!(": {e}"))
            ),
        ),
    }
}

fn checks(run: &Run, names: &[&str]) -> (bool, String) {
    let parts: Vec<(bool, String)> = names.iter().map(|n| check(run, n)).collect();
    (
        parts.iter().all(|p| p.0),
        parts
            .into_iter()
            .map(|p| p.1)
            .collect::<Vec<_>>()
            .join("; "),
    )
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            headers
                .iter()
                .zip(rec.unwrap().iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

fn criterion_1_to_3(tmp: &Path) -> [Outcome; 3] {
    let cfg = ExperimentConfig::default();
    let path = write_config(tmp, "gaussian", &cfg);
    let run = hsl("verify-gaussian", &path, &tmp.join("gaussian"), 1);
    let (ok, s) = checks(&run, &["posterior_mean", "posterior_variance"]);
    let secs = run.elapsed.as_secs_f64();
    let c1 = outcome(
        ok && secs <= 120.0,
        format!(
            "{s}; {} paths x {} steps in {secs:.1}s single-threaded (limit 120s)",
            cfg.sde.n_paths, cfg.sde.steps
        ),
    );
    let (ok2, s2) = check(&run, "exact_start_fixed_point");
    let (ok3, s3) = check(&run, "convergence_slope");
    [
        outcome(c1.pass, c1.summary),
        outcome(ok2, s2),
        outcome(ok3, s3),
    ]
}

fn criterion_4_to_6(tmp: &Path) -> [Outcome; 3] {
    let cfg = ExperimentConfig::default();
    let path = write_config(tmp, "score", &cfg);
    let run = hsl("score-norm", &path, &tmp.join("score"), 1);
    let rows = read_csv(&run.dir.join("score_norm.csv"));

    let mut worst: f64 = 0.0;
    let mut seen = 0;
    for r in &rows {
        let t: f64 = r["t"].parse().unwrap();
        if r["variant"] == "conditional" && [0.05, 0.5, 2.0].iter().any(|s| (s - t).abs() < 1e-12) {
            let a: f64 = r["analytic"].parse().unwrap();
            let m: f64 = r["monte_carlo"].parse().unwrap();
            worst = worst.max((m - a).abs() / a);
            seen += 1;
        }
    }
    let (trace_ok, trace_s) = check(&run, "unconditional_trace");
    let c4 = outcome(
        seen == 3 && worst <= 0.01 && trace_ok,
        format!(
            "max relative MC gap at t in {{0.05, 0.5, 2}} = {worst:.3e} (limit 1e-2); {trace_s}"
        ),
    );

    let (ok5, s5) = checks(&run, &["noiseless_blowup_slope", "noiseless_limit"]);
    let psi_ts: Vec<f64> = rows
        .iter()
        .filter(|r| r["variant"] == "psi")
        .map(|r| r["t"].parse().unwrap())
        .collect();
    let covers = psi_ts
        .iter()
        .all(|t| (0.01..=cfg.problem.horizon).contains(t))
        && !psi_ts.is_empty();
    let (ok6, s6) = checks(&run, &["crude_bound", "psi_prop3_bound"]);
    [
        c4,
        outcome(ok5, s5),
        outcome(ok6 && covers, format!("{s6}; psi prior at t = {psi_ts:?}")),
    ]
}

fn criterion_7(tmp: &Path) -> Outcome {
    let cfg = ExperimentConfig::default();
    let path = write_config(tmp, "dsm", &cfg);
    let run = hsl("dsm-linear", &path, &tmp.join("dsm"), 1);
    let (ok, s) = check(&run, "linear_fit");
    let secs = run.elapsed.as_secs_f64();
    let setup = cfg.dsm.n_samples == 1_000_000 && cfg.dsm.bins == 8;
    outcome(
        ok && setup && secs <= 180.0,
        format!(
            "{s}; {} samples, {} bins in {secs:.1}s (limit 180s)",
            cfg.dsm.n_samples, cfg.dsm.bins
        ),
    )
}

fn criterion_8(tmp: &Path) -> Outcome {
    let cfg = ExperimentConfig::default();
    let path = write_config(tmp, "oracle", &cfg);
    let run = hsl("oracle-compare", &path, &tmp.join("oracle"), 1);
    let (ok, s) = checks(&run, &["oracle_vs_gaussian", "oracle_vs_mixture"]);
    let tight = cfg.oracle.gaussian_tol <= 1e-7 && cfg.oracle.mixture_tol <= 1e-6;
    outcome(ok && tight, s)
}

fn criterion_9() -> Outcome {
    let schedule = NoiseSchedule::default();
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for seed in [11u64, 12, 13] {
        let params = OperatorParams::init(OperatorArch::desk(), seed).unwrap();
        let mut data = StylizedData::new(seed, &schedule, (15, 50), (-3.0, 3.0)).unwrap();
        let batch = data.batch(0, 4);
        let (_, grad) = op_backward(&params, &batch).unwrap();
        let mut rng = substream(seed, 99);
        for _ in 0..100 {
            let i = rng.random_range(0..params.n_params());
            let h = 1e-5;
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let fd =
                (op_loss(&plus, &batch).unwrap() - op_loss(&minus, &batch).unwrap()) / (2.0 * h);
            let an = grad.as_slice()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-7));
            probes += 1;
        }
    }
    outcome(
        worst < 1e-4,
        format!(
            "{probes} central-difference probes, worst relative error {worst:.3e} (limit 1e-4)"
        ),
    )
}

fn criterion_10(tmp: &Path) -> Outcome {
    let cfg = ExperimentConfig::default();
    let path = write_config(tmp, "stylized", &cfg);
    let out = tmp.join("stylized");
    let train = hsl("train-stylized", &path, &out, 1);
    let sample = hsl("sample-stylized", &path, &out, 1);
    let secs = (train.elapsed + sample.elapsed).as_secs_f64();
    let steps_ok = cfg.train.optimizer.steps <= 5000 && cfg.train.optimizer.batch_size == 128;
    let sizes_ok = cfg.sample.grid_sizes == [20, 25, 30, 35, 40] && cfg.sample.n_samples == 2000;
    let mut names = Vec::new();
    for y in &cfg.sample.y_values {
        names.push(format!("bimodal_y={y}"));
        names.push(format!("ks_cross_grid_y={y}"));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let (ok, s) = checks(&sample, &refs);
    let trained = train.manifest.error.is_none();
    outcome(
        ok && steps_ok && sizes_ok && trained && secs <= 1800.0,
        format!("{s}; train + sample {secs:.0}s (limit 1800s)"),
    )
}

/// Small versions of every experiment, so each subcommand can run twice.
fn quick_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sde.n_paths = 4000;
    cfg.sde.steps = 200;
    cfg.score_norm.mc_samples = 20_000;
    cfg.score_norm.psi_samples = 1000;
    cfg.score_norm.psi_t_values = vec![0.1, 1.0];
    cfg.dsm.n_samples = 40_000;
    cfg.oracle.lattice_points = 5;
    cfg.train.optimizer.steps = 12;
    cfg.train.optimizer.batch_size = 16;
    cfg.sample.n_samples = 70;
    cfg.sample.grid_sizes = vec![20, 25];
    cfg.sample.extrapolation_sizes = vec![60];
    cfg.sample.reference_size = 25;
    cfg
}

fn data_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            name.ends_with(".csv") || name == "checkpoint.json"
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn criterion_11(tmp: &Path) -> Outcome {
    let cfg = quick_config();
    let path = write_config(tmp, "quick", &cfg);
    let subcommands = [
        "verify-gaussian",
        "score-norm",
        "dsm-linear",
        "oracle-compare",
        "train-stylized",
        "sample-stylized",
    ];
    let mut outputs = Vec::new();
    for threads in [1, 2] {
        let out = tmp.join(format!("quick_t{threads}"));
        for sub in subcommands {
            let run = hsl(sub, &path, &out, threads);
            assert!(
                run.code == 0 || run.code == 1,
                "{sub} exited with {}",
                run.code
            );
        }
        outputs.push(data_files(&out));
    }
    let rerun = tmp.join("quick_again");
    for sub in subcommands {
        hsl(sub, &path, &rerun, 2);
    }
    outputs.push(data_files(&rerun));
    let same = outputs[0] == outputs[1] && outputs[1] == outputs[2];
    let differing: Vec<&String> = outputs[0]
        .keys()
        .filter(|k| outputs[1].get(*k) != outputs[0].get(*k))
        .collect();
    outcome(
        same && outputs[0].len() >= 12,
        format!("{} files compared across --threads 1, --threads 2 and a rerun; differing: {differing:?}", outputs[0].len()),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let report = |n: u32, o: Outcome, results: &mut Vec<(u32, Outcome)>| {
        println!(
            "{} criterion {n}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.summary
        );
        results.push((n, o));
    };

    let [c1, c2, c3] = criterion_1_to_3(t);
    report(1, c1, &mut results);
    report(2, c2, &mut results);
    report(3, c3, &mut results);
    let [c4, c5, c6] = criterion_4_to_6(t);
    report(4, c4, &mut results);
    report(5, c5, &mut results);
    report(6, c6, &mut results);
    report(7, criterion_7(t), &mut results);
    report(8, criterion_8(t), &mut results);
    report(9, criterion_9(), &mut results);
    report(10, criterion_10(t), &mut results);
    report(11, criterion_11(t), &mut results);

    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(n, o)| o.pass == KNOWN_FAILURES.contains(n))
        .map(|(n, _)| *n)
        .collect();
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria pass; known failures {KNOWN_FAILURES:?}",
        results.len()
    );
    if !unexpected.is_empty() {
        println!("acceptance: unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
