use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn modecons(args: &[&str], config: &Path, out: Option<&Path>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_modecons"));
    cmd.args(args).arg("--config").arg(config);
    if let Some(out) = out {
        cmd.arg("--out-dir").arg(out);
    }
    cmd.output().unwrap()
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
}

#[test]
fn repeated_runs_write_identical_time_series() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = scenario("ring10_plug_and_play.toml");
    for out in [&a, &b] {
        let o = modecons(&["run"], &cfg, Some(out));
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    assert!(!fa.is_empty());
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
    }
    for f in ["manifest.json", "summary.json", "config.toml"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[network]\nkind = \"ring\"\nn = 4\n[attributes]\nhistogram = [1, 2]\n[algorithm]\nkind = \"direct\"\n").unwrap();
    let o = modecons(&["validate"], &bad, None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("attributes.histogram"));

    let o = modecons(&["validate"], &scenario("ring10_plug_and_play.toml"), None);
    assert_eq!(o.status.code(), Some(0));

    let o = Command::new(env!("CARGO_BIN_EXE_modecons"))
        .args(["run", "--dt", "1.0", "--config"])
        .arg(scenario("ring40_apriori.toml"))
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bounds_prints_json() {
    let o = modecons(&["bounds"], &scenario("ring40_direct.toml"), None);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let t_y = v["t_y"].as_f64().unwrap();
    assert!((t_y - 1.561_786_298_659_572).abs() < 1e-12);
}
