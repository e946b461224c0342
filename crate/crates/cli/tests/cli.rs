use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cnls(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cnls"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CNLS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn lattice_reports_the_second_type_pair() {
    let tmp = TempDir::new().unwrap();
    let out = cnls(&["lattice", "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&tmp.path().join("o/lattice.json"));
    assert_eq!(report["verdict"]["admissible"], true);
    assert_eq!(report["verdict"]["L2"].as_array().unwrap().len(), 1);
    let manifest = json(&tmp.path().join("o/manifest.json"));
    assert_eq!(manifest["subcommand"], "lattice");
    assert!(manifest["outputs"]["lattice_sites.csv"].is_string());
}

#[test]
fn non_admissible_set_is_an_error_for_normalform() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "sites = [[0, 0], [1, 0], [2, 0]]\nradius = 5\n");
    let out = cnls(&["normalform", "--config", &cfg, "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ambiguous"));
    let out = cnls(&["lattice", "--config", &cfg, "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "u.toml", "d = 2\nfoo = 1\n");
    let out = cnls(&["lattice", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));
    let cfg = write(tmp.path(), "x.toml", "xi = [0.02, 1e-3, 1e-3, 1e-3]\n");
    assert_eq!(cnls(&["simulate", "--config", &cfg], tmp.path()).status.code(), Some(2));
    let cfg = write(tmp.path(), "s.toml", "xi = [1e-3, 1e-3, 1e-3, 1e-3]\nT = 1.0\ndt = 1e-3\nstride = 7\n");
    assert_eq!(cnls(&["simulate", "--config", &cfg], tmp.path()).status.code(), Some(2));
    assert_eq!(cnls(&["lattice", "--config", "missing.toml"], tmp.path()).status.code(), Some(2));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "m.toml", "samples = 100\nseed = 11\nk_max = 6\nradius = 6\n");
    for dir in ["r1", "r2"] {
        for sub in ["lattice", "normalform", "melnikov"] {
            let out = cnls(&[sub, "--config", &cfg, "--out-dir", &format!("{dir}/{sub}")], tmp.path());
            assert_ne!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    for (sub, file) in [
        ("lattice", "lattice.json"),
        ("lattice", "lattice_sites.csv"),
        ("normalform", "normalform.json"),
        ("normalform", "f_terms.csv"),
        ("melnikov", "melnikov.json"),
        ("melnikov", "melnikov_scan.csv"),
    ] {
        let a = fs::read(tmp.path().join(format!("r1/{sub}/{file}"))).unwrap();
        let b = fs::read(tmp.path().join(format!("r2/{sub}/{file}"))).unwrap();
        assert_eq!(a, b, "{sub}/{file} differs");
    }
}

#[test]
fn seed_flag_overrides_config_and_thread_count_is_irrelevant() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "m.toml", "samples = 64\nseed = 1\nk_max = 5\nradius = 5\n");
    let a = cnls(&["melnikov", "--config", &cfg, "--seed", "9", "--threads", "1", "--out-dir", "a"], tmp.path());
    let b = cnls(&["melnikov", "--config", &cfg, "--seed", "9", "--threads", "2", "--out-dir", "b"], tmp.path());
    assert_ne!(a.status.code(), Some(2));
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(json(&tmp.path().join("a/manifest.json"))["seed"], 9);
    assert_eq!(
        fs::read(tmp.path().join("a/melnikov.json")).unwrap(),
        fs::read(tmp.path().join("b/melnikov.json")).unwrap()
    );
}

#[test]
fn out_dir_env_var_applies_and_flag_wins() {
    let tmp = TempDir::new().unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["lattice"];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_cnls"))
            .args(&args)
            .current_dir(tmp.path())
            .env("CNLS_OUT_DIR", "from_env")
            .output()
            .unwrap()
    };
    assert_eq!(run(&[]).status.code(), Some(0));
    assert!(tmp.path().join("from_env/lattice.json").exists());
    assert_eq!(run(&["--out-dir", "from_flag"]).status.code(), Some(0));
    assert!(tmp.path().join("from_flag/lattice.json").exists());
}

#[test]
fn simulate_writes_trace_and_verdict() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "s.toml",
        "d = 1\nb = 2\nsites = [[1, 0], [-1, 0]]\nxi = [8e-4, 6e-4]\nN = 16\ndt = 2e-3\nT = 2.0\nstride = 100\n",
    );
    let out = cnls(&["simulate", "--config", &cfg, "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(tmp.path().join("o/trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 1 + 1000 / 100 + 1);
    assert!(lines[0].starts_with("t,re_q1_1_0,im_q1_1_0"));
    assert!(lines[0].ends_with("mass_1,normal_sup_1"));
    let verdict = json(&tmp.path().join("o/verdict.json"));
    assert_eq!(verdict["pass"], true);
}

#[test]
fn verify_passes_on_the_default_scenario() {
    let tmp = TempDir::new().unwrap();
    let out = cnls(&["verify", "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&tmp.path().join("o/verify.json"));
    assert_eq!(report["pass"], true);
    let ratio = report["freq_error_ratio"].as_f64().unwrap();
    assert!((3.0..=5.0).contains(&ratio), "{ratio}");
}
