use std::fs;
use std::path::Path;
use std::process::Command;

use diffmask::cli::{self, main_with_args};

const TINY: &[&str] = &[
    "--seed",
    "5",
    "--data-size",
    "300",
    "--model-epochs",
    "2",
    "--target-accuracy",
    "0",
    "--probe-epochs",
    "2",
    "--table1-examples",
    "12",
    "--table2-examples",
    "4",
    "--per-example-steps",
    "20",
];

fn run_in(dir: &Path, command: &str, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec!["diffmask".to_string(), command.to_string(), "--out-dir".into(), dir.display().to_string()];
    args.extend(TINY.iter().map(|s| s.to_string()));
    args.extend(extra.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with_args(args, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn pipeline(dir: &Path, mode: &str) {
    for stage in ["generate-data", "train-model", "train-probe", "attribute", "compare", "report"] {
        let (code, _, err) = run_in(dir, stage, &["--mode", mode]);
        assert_eq!(code, 0, "{stage} failed: {err}");
    }
}

#[test]
fn pipeline_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "hidden");
    pipeline(b.path(), "hidden");
    for file in [
        cli::TRAIN_LOG_FILE,
        cli::CONSTRAINT_FILE,
        cli::ATTRIBUTION_CSV,
        cli::TABLE1_CSV,
        cli::TABLE2_CSV,
        cli::COMPARE_CSV,
        cli::DATA_FILE,
        cli::MODEL_FILE,
        cli::PROBE_FILE,
    ] {
        let (x, y) = (fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
        assert!(x == y, "{file} differs between identical runs");
    }
    let report = fs::read_to_string(a.path().join(cli::REPORT_FILE)).unwrap();
    assert!(report.contains("erasure"), "{report}");
}

#[test]
fn input_mode_heatmap_has_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate-data", "train-model", "train-probe", "attribute"] {
        let (code, _, err) = run_in(dir.path(), stage, &["--mode", "input", "--digits", "7,3,7,1", "--query", "7,1"]);
        assert_eq!(code, 0, "{stage} failed: {err}");
    }
    let csv = fs::read_to_string(dir.path().join(cli::ATTRIBUTION_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "position,digit,layer_0,layer_1");
    assert_eq!(lines.len(), 5);
    let svg = fs::read_to_string(dir.path().join(cli::ATTRIBUTION_SVG)).unwrap();
    assert_eq!(svg.matches("<rect").count(), 8, "{svg}");
}

#[test]
fn missing_artifact_exits_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run_in(dir.path(), "train-probe", &[]);
    assert_eq!(code, 1);
    assert!(err.contains(&dir.path().join(cli::DATA_FILE).display().to_string()), "{err}");
}

#[test]
fn config_errors_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "seed = 1\nmargin = 0.05\nprobe-epochs = \"many\"\n").unwrap();
    let args = ["diffmask", "generate-data", "--config", config.to_str().unwrap()];
    let (mut out, mut err) = (Vec::new(), Vec::new());
    assert_eq!(main_with_args(args, &mut out, &mut err), 1);
    let err = String::from_utf8(err).unwrap();
    assert!(err.contains("run.toml:3:"), "{err}");
}

#[test]
fn config_values_are_used_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, format!("seed = 2\ndata-size = 100\nout-dir = \"{}\"\n", dir.path().display())).unwrap();
    let args = ["diffmask", "generate-data", "--config", config.to_str().unwrap(), "--data-size", "60"];
    let (mut out, mut err) = (Vec::new(), Vec::new());
    assert_eq!(main_with_args(args, &mut out, &mut err), 0, "{}", String::from_utf8_lossy(&err));
    let lines = fs::read_to_string(dir.path().join(cli::DATA_FILE)).unwrap().lines().count();
    assert_eq!(lines, 60);
}

#[test]
fn binary_reports_usage_errors() {
    let bin = env!("CARGO_BIN_EXE_diffmask");
    let status = Command::new(bin).arg("no-such-command").output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["generate-data", "train-model", "train-probe", "attribute", "compare", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn binary_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_diffmask"))
        .args(["generate-data", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}
