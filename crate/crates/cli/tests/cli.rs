//! End-to-end runs of the `trajent` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn trajent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajent")).args(args).output().expect("binary runs")
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    trajent(&args)
}

fn verdict(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("verdict.json")).unwrap()).unwrap()
}

/// The benchmark scaled down to keep the suite quick.
const SMALL: &str = r#"
[nonlinearity]
kind = "porous_medium"
m = 2.0

[grid]
dim = 1
extent = [[0.0, 1.0]]
n_cells = [100]

[initial]
kind = "cosine"
amplitude = 0.5

[time]
t_end = 0.02
snapshot_every = 1e-4

[particles]
count = 4000
dt = 1e-4
seed = 3
record = 4
record_stride = 20

[perturbation]
kind = "cosine"
k = 1
amplitude = 0.1

[hwi]
random_pairs = 5
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn stationary_config_passes_with_vanishing_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("all", &configs().join("stationary.toml"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = verdict(dir.path());
    assert_eq!(v["schema"], 1);
    assert_eq!(v["passed"], true);
    for (name, check) in v["checks"].as_object().unwrap() {
        if name != "marginal_law" {
            if let Some(m) = check["metric"].as_f64() {
                assert!(m.abs() <= 1e-10, "{name}: {m}");
            }
        }
    }
}

#[test]
fn full_run_covers_every_label_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run("all", &config, out, &[]);
        assert_eq!(o.status.code(), Some(0), "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    }
    let bytes = |p: &Path| std::fs::read(p.join("verdict.json")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));

    let v = verdict(&a);
    let mut labels: Vec<&str> = v["checks"].as_object().unwrap().values().map(|c| c["label"].as_str().unwrap()).collect();
    labels.sort();
    labels.dedup();
    let mut want = vec!["Eq4", "Eq8-decomposition", "Eq16", "Eq17", "Eq19", "Eq20", "FW", "FWp", "FW-FWp", "HWI"];
    want.sort();
    assert_eq!(labels, want);
    assert!(v["checks"].as_object().unwrap().values().all(|c| c["status"] == "pass"));

    for file in [
        "run_summary.json",
        "snapshots.csv",
        "density_final.csv",
        "ensemble_summary.json",
        "trajectories.csv",
        "identity.csv",
        "perturbed_identity.csv",
        "slopes.json",
        "hwi.json",
    ] {
        assert!(a.join(file).is_file(), "missing {file}");
    }
    let identity = std::fs::read_to_string(a.join("identity.csv")).unwrap();
    assert_eq!(identity.lines().next(), Some("t,lhs,rhs,residual"));
}

#[test]
fn seed_override_changes_only_the_stochastic_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("simulate", &config, &a, &[]).status.code(), Some(0));
    assert_eq!(run("simulate", &config, &b, &["--seed", "99"]).status.code(), Some(0));
    let (va, vb) = (verdict(&a), verdict(&b));
    assert_ne!(va["checks"]["decomposition_martingale"], vb["checks"]["decomposition_martingale"]);
    assert_eq!(va["command"], "simulate");
    assert!(va["checks"].get("identity").is_none());
}

#[test]
fn subcommands_run_only_their_stages() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("hwi");
    assert_eq!(run("hwi", &config, &out, &[]).status.code(), Some(0));
    let v = verdict(&out);
    let names: Vec<&String> = v["checks"].as_object().unwrap().keys().collect();
    assert_eq!(names, ["geodesic", "hwi"]);
    assert!(!out.join("run_summary.json").exists());

    let out = dir.path().join("solve");
    assert_eq!(run("solve", &config, &out, &[]).status.code(), Some(0));
    assert!(out.join("perturbed_snapshots.csv").is_file());
    assert!(verdict(&out)["checks"].as_object().unwrap().is_empty());
}

#[test]
fn json_config_is_equivalent() {
    let dir = tempfile::tempdir().unwrap();
    let parsed: toml::Value = toml::from_str(SMALL).unwrap();
    let config = write(dir.path(), "small.json", &serde_json::to_string_pretty(&parsed).unwrap());
    let toml_config = write(dir.path(), "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("verify", &config, &a, &[]).status.code(), Some(0));
    assert_eq!(run("verify", &toml_config, &b, &[]).status.code(), Some(0));
    assert_eq!(std::fs::read(a.join("verdict.json")).unwrap(), std::fs::read(b.join("verdict.json")).unwrap());
}

#[test]
fn csv_initial_density_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "small.toml", SMALL);
    let first = dir.path().join("first");
    assert_eq!(run("solve", &config, &first, &[]).status.code(), Some(0));
    let restart = SMALL.replace("kind = \"cosine\"\namplitude = 0.5", "kind = \"csv\"\npath = \"first/density_final.csv\"");
    let config = write(dir.path(), "restart.toml", &restart);
    let out = dir.path().join("second");
    let o = run("verify", &config, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn non_integer_wavenumber_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.toml", &SMALL.replace("k = 1\n", "k = 1.5\n"));
    let o = run("all", &config, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    let line = SMALL.lines().position(|l| l == "k = 1").unwrap() + 1;
    assert!(err.contains("`perturbation.k`") && err.contains(&format!("(line {line})")), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn malformed_and_unknown_fields_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let broken = write(dir.path(), "broken.toml", &SMALL.replace("m = 2.0", "m = "));
    let o = run("all", &broken, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&o.stderr));

    let typo = write(dir.path(), "typo.toml", &SMALL.replace("amplitude = 0.5", "amplitud = 0.5"));
    let o = run("all", &typo, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("amplitud"));

    let o = run("all", &dir.path().join("missing.toml"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(trajent(&["all"]).status.code(), Some(2));
}

#[test]
fn failed_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "coarse.toml", &SMALL.replace("n_cells = [100]", "n_cells = [6]"));
    let o = run("verify", &config, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    let v = verdict(dir.path());
    assert_eq!(v["passed"], false);
    assert_eq!(v["checks"]["identity"]["status"], "fail");
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL Eq4"));
}

#[test]
fn benchmark_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("all", &configs().join("benchmark.toml"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}
