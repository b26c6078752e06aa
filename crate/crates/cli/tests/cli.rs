use std::path::Path;
use std::process::{Command, Output};

use hsl_cli::config::NoiseConfig;
use hsl_cli::{CheckStatus, ExperimentConfig, RunManifest};

fn hsl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("HSL_OUT")
        .output()
        .unwrap()
}

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sde.n_paths = 4000;
    cfg.sde.steps = 200;
    cfg
}

fn write(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn one_step_discretization_fails_with_recorded_bias() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.sde.steps = 1;
    let path = write(tmp.path(), &cfg);
    let out = hsl(&["verify-gaussian", "--config", &path], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let m = RunManifest::read(&tmp.path().join("verify-gaussian.manifest.json")).unwrap();
    let var = m.check("posterior_variance").unwrap();
    assert_eq!(var.status, CheckStatus::Fail);
    assert!(var.measured.unwrap() > 0.05);
    // the closed-form checks do not depend on the step count
    assert_eq!(
        m.check("exact_start_fixed_point").unwrap().status,
        CheckStatus::Pass
    );
}

#[test]
fn noiseless_problem_marks_uniform_bound_not_applicable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.problem.noise = NoiseConfig::Isotropic { sigma_b: 0.0 };
    cfg.checks.prop3 = true;
    let path = write(tmp.path(), &cfg);
    hsl(&["verify-gaussian", "--config", &path], tmp.path());
    let m = RunManifest::read(&tmp.path().join("verify-gaussian.manifest.json")).unwrap();
    let c = m.check("prop3_bound").unwrap();
    assert_eq!(c.status, CheckStatus::NotApplicable);
    assert_eq!(c.detail, "not applicable: noiseless regime");
}

#[test]
fn config_typos_are_reported_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[sde]\nsteps = 10\nn_path = 5\n").unwrap();
    let out = hsl(
        &["score-norm", "--config", path.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_path") && err.contains("line 3"), "{err}");
}

#[test]
fn sampling_without_checkpoint_is_an_error_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write(tmp.path(), &small());
    let out = hsl(&["sample-stylized", "--config", &path], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let m = RunManifest::read(&tmp.path().join("sample-stylized.manifest.json")).unwrap();
    assert!(m.error.unwrap().contains("missing checkpoint"));
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    std::fs::create_dir_all(&first).unwrap();
    let sparse = first.join("sparse.toml");
    std::fs::write(&sparse, "[dsm]\nn_samples = 20000\n").unwrap();
    hsl(
        &[
            "dsm-linear",
            "--config",
            sparse.to_str().unwrap(),
            "--seed",
            "4",
        ],
        &first,
    );
    let effective = first.join("dsm-linear.config.toml");
    let mut cfg = ExperimentConfig::load(&effective).unwrap();
    cfg.sde.seed = 4;
    let path = write(tmp.path(), &cfg);
    hsl(&["dsm-linear", "--config", &path], &second);
    let a = std::fs::read(first.join("dsm_fit.csv")).unwrap();
    let b = std::fs::read(second.join("dsm_fit.csv")).unwrap();
    assert_eq!(a, b);
    let m1 = RunManifest::read(&first.join("dsm-linear.manifest.json")).unwrap();
    assert_eq!(m1.seed, 4);
}

#[test]
fn out_dir_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.oracle.lattice_points = 3;
    cfg.oracle.priors = vec![hsl_cli::config::OraclePrior::Gaussian];
    cfg.output.directory = tmp.path().join("from_config");
    let path = write(tmp.path(), &cfg);
    let env_dir = tmp.path().join("from_env");
    let status = Command::new(env!("CARGO_BIN_EXE_hsl"))
        .args(["oracle-compare", "--config", &path])
        .env("HSL_OUT", &env_dir)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(env_dir.join("oracle_compare.csv").exists());
    assert!(!tmp.path().join("from_config").exists());
    let status = Command::new(env!("CARGO_BIN_EXE_hsl"))
        .args(["oracle-compare", "--config", &path])
        .env_remove("HSL_OUT")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(tmp
        .path()
        .join("from_config")
        .join("oracle-compare.manifest.json")
        .exists());
}

#[test]
fn json_tables_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.oracle.lattice_points = 3;
    cfg.oracle.priors = vec![hsl_cli::config::OraclePrior::Gaussian];
    cfg.output.formats = vec![hsl_cli::config::Format::Csv, hsl_cli::config::Format::Json];
    let path = write(tmp.path(), &cfg);
    hsl(&["oracle-compare", "--config", &path], tmp.path());
    let text = std::fs::read_to_string(tmp.path().join("oracle_compare.json")).unwrap();
    let rows: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 8 * 3 * 3);
}
