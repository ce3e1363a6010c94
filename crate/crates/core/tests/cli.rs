use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tollflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tollflow")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn short_s1(dir: &Path, out: &str) -> String {
    write_config(
        dir,
        &format!("preset = s1\nhorizon = 300\nseeds = 4..6\node_horizon = 0.3\nartifacts = trajectory, ode, stats\noutput = {out}\n"),
    )
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let cfg = short_s1(dir.path(), &out.to_string_lossy());
        let res = tollflow(&["simulate", "--config", &cfg]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let (first, second) = (listing(&a), listing(&b));
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["ode.csv", "stats.csv", "trajectory_seed4.csv", "trajectory_seed5.csv"]
    );
    assert_eq!(first, second);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_s1(dir.path(), "ignored");
    let out = dir.path().join("flagged");
    let res = tollflow(&[
        "config",
        "--config",
        &cfg,
        "--preset",
        "s4",
        "--seeds",
        "7,9",
        "--out",
        &out.to_string_lossy(),
    ]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.contains("preset = s4"));
    assert!(text.contains("seeds = 7, 9") || text.contains("seeds = 7,9"), "{text}");
    assert!(text.contains(&*out.to_string_lossy()));
    // the resolved text parses back to the same configuration
    let again = write_config(dir.path(), &text);
    let res = tollflow(&["config", "--config", &again]);
    assert_eq!(String::from_utf8(res.stdout).unwrap(), text);
}

#[test]
fn equilibrium_prints_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eq");
    let res = tollflow(&["equilibrium", "--preset", "s2", "--out", &out.to_string_lossy()]);
    assert!(res.status.success());
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("equilibrium.json")).unwrap()).unwrap();
    assert_eq!(written["preset"], "s2");
    assert_eq!(written["demand"].as_f64().unwrap(), 4.0);
    assert!(String::from_utf8(res.stdout).unwrap().contains("\"social_load\""));
}

#[test]
fn verify_passes_on_presets() {
    for preset in ["s1", "s3"] {
        let res = tollflow(&["verify", "--preset", preset]);
        let table = String::from_utf8(res.stdout).unwrap();
        assert!(res.status.success(), "{table}");
        assert!(!table.contains("FAIL"));
    }
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset = s1\na = 2\n");
    let res = tollflow(&["simulate", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("a = 2"));

    let cfg = write_config(dir.path(), "preset = s1\nwarp = 9\n");
    let res = tollflow(&["config", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));

    let res = tollflow(&["ode", "--preset", "s3"]);
    assert_eq!(res.status.code(), Some(2));

    let missing = dir.path().join("missing.cfg");
    let res = tollflow(&["config", "--config", &missing.to_string_lossy()]);
    assert_eq!(res.status.code(), Some(2));
}
