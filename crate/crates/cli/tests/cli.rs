use std::path::Path;
use std::process::{Command, Output};

fn ecgli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgli")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn config_subcommand_prints_parseable_defaults() {
    let out = ecgli(&["config", "--case", "ischemia-radius-2d"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = ecgli::config::RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.case, "ischemia-radius-2d");
    assert_eq!(cfg.to_toml(), text);
}

#[test]
fn bad_config_exits_with_code_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "case = \"stimulus-2d\"\n[simulation]\ndt = -0.1\n").unwrap();
    let out = ecgli(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulation.dt"));

    std::fs::write(&cfg, "case = \"stimulus-2d\"\n[simulation]\nbogus = 1\n").unwrap();
    let out = ecgli(&["run", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn plot_rejects_an_empty_csv_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let svg = dir.path().join("out.svg");
    let out = ecgli(&["plot", p(&empty), "--out", p(&svg)]);
    assert!(!out.status.success());
    assert!(!svg.exists());
}

#[test]
fn plot_overlays_signals() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let sig = ecgli::pecg::PecgSignal::new(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.5, 0.0]], 0.0, 1.0).unwrap();
    sig.save_csv(&csv).unwrap();
    let svg = dir.path().join("out.svg");
    let out = ecgli(&["plot", p(&csv), p(&csv), "--out", p(&svg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 4);
}

#[test]
fn missing_model_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecgli(&[
        "invert",
        "--model",
        p(&dir.path().join("nope.bin")),
        "--observed",
        p(&dir.path().join("x.csv")),
        "--case",
        "stimulus-2d",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(4));
}
