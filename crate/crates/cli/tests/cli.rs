use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"{
  "name": "cli-smoke",
  "seed": 3,
  "data": {"kind": "synthetic1d"},
  "split": {"train": 0.75, "validation": 0.0},
  "standardize": false,
  "network": {"hidden": [6], "activation": "tanh"},
  "prior": "gaussian",
  "target": {"kind": "fixed", "family": "rbf", "amplitude": 1.0, "lengthscales": [0.6]},
  "tuner": {"num_samples": 8, "num_measurement": 6, "n_lipschitz": 2, "outer_steps": 2},
  "sampler": {"burn_in": 20, "thinning": 2, "samples_per_chain": 10, "chains": 2},
  "likelihood": {"kind": "gaussian", "noise_variance": 0.1},
  "grid": {"lo": -10.0, "hi": 10.0, "points": 11}
}"#;

fn gpprior(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gpprior"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pipeline_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let res = gpprior(&["pipeline", "--config", &cfg, "--out", out_s]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("test_rmse"));
    let metrics = std::fs::read(out.join("metrics.json")).unwrap();

    let res = gpprior(&["evaluate", "--config", &cfg, "--out", out_s]);
    assert!(res.status.success());
    assert_eq!(std::fs::read(out.join("metrics.json")).unwrap(), metrics);

    let res = gpprior(&["sample", "--config", &cfg, "--out", out_s, "--seed", "4"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("stage sample failed"));
}

#[test]
fn fit_prior_and_synth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("fit");
    let res = gpprior(&[
        "fit-prior",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(out.join("prior.json").is_file());
    assert!(out.join("wasserstein_trace.csv").is_file());
    assert!(!out.join("metrics.json").exists());

    let syn = dir.path().join("syn");
    let res = gpprior(&["synth", "--config", &cfg, "--out", syn.to_str().unwrap()]);
    assert!(res.status.success());
    let text = std::fs::read_to_string(syn.join("data.csv")).unwrap();
    assert!(text.starts_with("x,y\n"));
    assert_eq!(text.lines().count(), 65);
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let res = gpprior(&["pipeline", "--config", &cfg]);
    assert!(!res.status.success());
    let res = gpprior(&[
        "pipeline", "--config", &cfg, "--out", "x", "--stage", "nope",
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown stage"));
    let res = gpprior(&["pipeline", "--config", "/no/such/config.json", "--out", "x"]);
    assert!(!res.status.success());
}
