use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use simdoa::manifest::RunManifest;

fn simdoa(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simdoa"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SIMDOA_OUT_DIR")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const FIT: &str = "[train]\nzeta = 0.8\nmax_iters = 200\n";

#[test]
fn fit_writes_stack_history_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "fit.toml", FIT);
    let out = dir.path().join("out");
    let o = simdoa(&["fit", "-c", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["stack.csv", "history.csv", "response.csv", "fit.manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let m = RunManifest::read(&out.join("fit.manifest.json")).unwrap();
    assert_eq!(m.command, "fit");
    assert_eq!(m.outputs.len(), 3);
    assert!(m.finished >= m.started);
}

#[test]
fn fit_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "fit.toml", "[train]\nmax_iters = 30\nseed = 9\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(simdoa(&["fit", "-c", cfg.to_str().unwrap()], &a).status.success());
    assert!(simdoa(&["fit", "-c", cfg.to_str().unwrap()], &b).status.success());
    let read = |d: &Path| std::fs::read(d.join("stack.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn spectrum_peak_near_source() {
    let dir = tempfile::tempdir().unwrap();
    let fit = write(dir.path(), "fit.toml", FIT);
    let out = dir.path().join("out");
    assert!(simdoa(&["fit", "-c", fit.to_str().unwrap()], &out).status.success());
    let spec = write(
        dir.path(),
        "spectrum.toml",
        "[protocol]\ntx = 64\nty = 64\n[source]\npsi_x = 0.48\npsi_y = 0.23\n[response]\nstack = \"out/stack.csv\"\n",
    );
    let o = simdoa(&["spectrum", "-c", spec.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let nums: Vec<f64> = text
        .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .filter_map(|s| s.parse().ok())
        .collect();
    let cell = 2.0 / 64.0;
    assert!((nums[0] - 0.48).abs() <= cell, "{text}");
    assert!((nums[1] - 0.23).abs() <= cell, "{text}");
    assert!(out.join("spectrum.csv").is_file());
}

#[test]
fn gradcheck_passes_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = simdoa(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("gradcheck.csv").is_file());
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(simdoa(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(simdoa(&["fit", "-c", "/nonexistent.toml"], dir.path()).status.code(), Some(2));
    let bad = write(dir.path(), "bad.toml", "[train]\nmax_iter = 5\n");
    let o = simdoa(&["fit", "-c", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("max_iter"));
    let syntax = write(dir.path(), "syntax.toml", "[train\n");
    assert_eq!(simdoa(&["fit", "-c", syntax.to_str().unwrap()], dir.path()).status.code(), Some(2));
    let invalid = write(dir.path(), "invalid.toml", "[geometry]\nlayers = 0\n");
    assert_eq!(simdoa(&["fit", "-c", invalid.to_str().unwrap()], dir.path()).status.code(), Some(2));
    let nosweep = write(dir.path(), "nosweep.toml", "");
    assert_eq!(simdoa(&["sweep", "-c", nosweep.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_simdoa"))
        .arg("gradcheck")
        .env("SIMDOA_OUT_DIR", &out)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("gradcheck.manifest.json").is_file());
}
