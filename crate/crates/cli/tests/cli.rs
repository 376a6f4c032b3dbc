use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const WEAK: &str = r#"
[params]
nu1 = 1.0
nu2 = 1.0
lambda1 = 0.5
lambda2 = 0.5
Lambda = 1.0
epsilon = 0.1
"#;

const STRONG: &str = r#"
[params]
nu1 = 1.0
nu2 = 1.0
lambda1 = 2.0
lambda2 = 2.0
Lambda = 1.0
epsilon = 0.01
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn dpmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpmf")).args(args).output().unwrap()
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--config", config.to_str().unwrap(), "--output", out.to_str().unwrap(), "--quiet"];
    args.extend_from_slice(extra);
    dpmf(&args)
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn check_passed(s: &Value, name: &str) -> bool {
    s["checks"].as_array().unwrap().iter().any(|c| c["name"] == name && c["passed"] == true)
}

#[test]
fn meanfield_without_blowups() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", &format!("command = \"meanfield\"\n{WEAK}\n[numerics]\nsigma_max = 3.0\n"));
    let out = dir.path().join("out");
    let res = run_config(&config, &out, &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let s = summary(&out);
    assert_eq!(s["blowups"].as_array().unwrap().len(), 0);
    assert!(s["metrics"]["conservation_residual"].as_f64().unwrap() < 1e-6);
    assert!(check_passed(&s, "conservation"));
    assert_eq!(s["config"]["params"]["lambda1"], 0.5);
    for f in ["clock.csv", "original.csv", "blowups.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let clock = std::fs::read_to_string(out.join("clock.csv")).unwrap();
    assert!(clock.starts_with("sigma,psi,G,G_eps,g,D,mass,outflow\n"));
    assert!(!clock.contains('\r'));
}

#[test]
fn summary_config_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", &format!("command = \"meanfield\"\n{WEAK}\n[numerics]\nsigma_max = 1.0\n"));
    let out = dir.path().join("out");
    assert_eq!(run_config(&config, &out, &[]).status.code(), Some(0));
    let embedded = serde_json::to_string(&summary(&out)["config"]).unwrap();
    let again = write_config(dir.path(), "again.json", &embedded);
    let out2 = dir.path().join("out2");
    assert_eq!(run_config(&again, &out2, &[]).status.code(), Some(0));
    let a = std::fs::read(out.join("clock.csv")).unwrap();
    let b = std::fs::read(out2.join("clock.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_reports_monotone_flag() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "command = \"sweep-delta\"\n{STRONG}\n[numerics]\nsigma_max = 4.0\n[sweep]\ndeltas = [0.2, 0.1, 0.05, 0.025]\nrelative = true\n"
    );
    let config = write_config(dir.path(), "sweep.toml", &text);
    let out = dir.path().join("out");
    let res = run_config(&config, &out, &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let s = summary(&out);
    assert_eq!(s["metrics"]["monotone"], Value::Bool(true));
    let rows = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);
}

#[test]
fn missing_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.toml", &format!("command = \"meanfield\"\n{}", WEAK.replace("lambda2 = 0.5\n", "")));
    let res = run_config(&config, &dir.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("missing required key `lambda2`"), "{err}");
}

#[test]
fn unknown_extension_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.yaml", "command: meanfield\n");
    let res = run_config(&config, &dir.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("command = \"particles\"\nseed = 3\n{STRONG}\n[particles]\ncounts = [50]\nreplicas = 2\nhorizon = 0.5\n");
    let config = write_config(dir.path(), "p.toml", &text);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(run_config(&config, &a, &[]).status.code(), Some(0));
    assert_eq!(run_config(&config, &b, &[]).status.code(), Some(0));
    assert_eq!(run_config(&config, &c, &["--seed", "4"]).status.code(), Some(0));
    for f in ["particles_K50.csv", "avalanches_K50.csv"] {
        let (x, y, z) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), std::fs::read(c.join(f)).unwrap());
        assert_eq!(x, y, "{f}");
        assert_ne!(x, z, "{f}");
    }
    assert_eq!(summary(&c)["config"]["seed"], 4);
}

#[test]
fn buffer_demo_columns() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("command = \"buffer-demo\"\n{}delta = 0.2\n", WEAK);
    let config = write_config(dir.path(), "demo.toml", &text);
    let out = dir.path().join("out");
    let res = run_config(&config, &out, &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = std::fs::read_to_string(out.join("buffer.csv")).unwrap();
    assert!(rows.starts_with("t,z,theta,B,E\n"));
    assert!(!summary(&out)["metrics"]["episodes"].as_array().unwrap().is_empty());
}

#[test]
fn blowup_report_and_kernel_dump() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("command = \"blowup-report\"\n{}\n[numerics]\nsigma_max = 4.0\n", STRONG.replace("0.01", "0.05"));
    let config = write_config(dir.path(), "b.toml", &text);
    let out = dir.path().join("out");
    let res = run_config(&config, &out, &["--dump-kernel", "1.0"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let s = summary(&out);
    assert!(!s["blowups"].as_array().unwrap().is_empty());
    assert!(check_passed(&s, "blowup size prediction"));
    let kernel = std::fs::read_to_string(out.join("kernel.csv")).unwrap();
    let mut lines = kernel.lines();
    assert_eq!(lines.next(), Some("sigma,h,H,bound"));
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[1] <= v[3] + 1e-12, "{line}");
    }
}

#[test]
fn failed_check_sets_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    // a conservation tolerance below round-off cannot be met
    let text = format!("command = \"meanfield\"\n{WEAK}\n[numerics]\nsigma_max = 1.0\ntol_mass = 1e-30\n");
    let config = write_config(dir.path(), "run.toml", &text);
    assert_eq!(run_config(&config, &dir.path().join("a"), &[]).status.code(), Some(1));
    assert_eq!(run_config(&config, &dir.path().join("b"), &["--no-check"]).status.code(), Some(0));
}
