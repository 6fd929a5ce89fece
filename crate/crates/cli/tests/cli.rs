use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualstress_cli::{RunManifest, MANIFEST_FILE};
use dualstress_core::io;

fn dualstress(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualstress")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

/// A paper-scale synthetic dataset written by the tool itself.
fn synth_dir(root: &Path) -> PathBuf {
    let dir = root.join("data");
    let o = dualstress(&["synth", "--preset", "paper-scale", "--seed", "5", "--out-dir", &path(&dir)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    dir
}

#[test]
fn usage_errors_exit_1_and_print_the_subcommand_help() {
    let o = dualstress(&["fit-dml", "--panel", "x.csv", "--out-dir", "o", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("--bogus"));
    assert!(err.contains("Usage: dualstress fit-dml"), "{err}");

    assert_eq!(dualstress(&[]).status.code(), Some(1));
    assert_eq!(dualstress(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn help_and_version_exit_0() {
    let o = dualstress(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["build-panel", "fit-lags", "fit-dml", "placebo", "seed-sweep", "predict-shap", "synth", "scenarios", "replay"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(dualstress(&["--version"]).status.code(), Some(0));
}

#[test]
fn invalid_values_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = path(&tmp.path().join("o"));
    let o = dualstress(&["synth", "--preset", "nonexistent", "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown preset"));

    let data = synth_dir(tmp.path());
    let panel = path(&data.join("panel.csv"));
    let o = dualstress(&["placebo", "--panel", &panel, "--placebo-mode", "shuffle", "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown placebo mode"));
    let o = dualstress(&["fit-dml", "--panel", &panel, "--folds", "1", "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_2_and_name_file_line_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    let out = path(&tmp.path().join("o"));

    let missing = tmp.path().join("absent.csv");
    assert_eq!(dualstress(&["fit-lags", "--panel", &path(&missing), "--out-dir", &out]).status.code(), Some(2));

    let wrong = tmp.path().join("wrong.csv");
    std::fs::write(&wrong, "a,b\n1,2\n").unwrap();
    let o = dualstress(&["fit-lags", "--panel", &path(&wrong), "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&format!("{}:1", path(&wrong))) && err.contains("student_id"), "{err}");

    // Corrupt one value on the third line of a valid panel.
    let data = synth_dir(tmp.path());
    let text = std::fs::read_to_string(data.join("panel.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == "cum_gpa").unwrap();
    let mut cells: Vec<String> = lines[2].split(',').map(String::from).collect();
    cells[col] = "not-a-number".into();
    lines[2] = cells.join(",");
    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let o = dualstress(&["fit-dml", "--panel", &path(&bad), "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&format!("{}:3", path(&bad))) && err.contains("cum_gpa"), "{err}");
}

#[test]
fn numerical_failures_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path());
    let mut panel = io::read_panel(&data.join("panel.csv")).unwrap();
    // Without strike variation the residualized treatments vanish.
    for row in &mut panel {
        for lag in [&mut row.strikes_lag1, &mut row.strikes_lag2, &mut row.strikes_lag3] {
            *lag = lag.map(|_| 0.0);
        }
        row.interaction_term = row.interaction_term.map(|_| 0.0);
    }
    let flat = tmp.path().join("flat.csv");
    std::fs::write(&flat, io::panel_csv(&panel).unwrap()).unwrap();
    let o = dualstress(&["fit-dml", "--panel", &path(&flat), "--trees", "10", "--out-dir", &path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("collinear"));
}

#[test]
fn every_command_writes_a_manifest_with_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path());
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(data.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.command, "synth");
    assert_eq!(manifest.seed, Some(5));
    assert!(!manifest.config.contains_key("out_dir") && !manifest.config.contains_key("threads"));
    for out in &manifest.outputs {
        let bytes = std::fs::read(data.join(&out.path)).unwrap();
        assert_eq!(dualstress_cli::sha256_hex(&bytes), out.sha256);
    }
    let names: Vec<&str> = manifest.outputs.iter().map(|o| o.path.as_str()).collect();
    for f in ["cpi.csv", "enrollment.csv", "panel.csv", "report.json", "report.txt", "strikes.csv", "truth.csv"] {
        assert!(names.contains(&f), "missing {f}");
    }
}

#[test]
fn replay_reproduces_and_detects_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path());
    let built = tmp.path().join("built");
    let o = dualstress(&[
        "build-panel",
        "--enrollment",
        &path(&data.join("enrollment.csv")),
        "--cpi",
        &path(&data.join("cpi.csv")),
        "--strikes",
        &path(&data.join("strikes.csv")),
        "--out-dir",
        &path(&built),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(built.join("panel.csv")).unwrap(), std::fs::read(data.join("panel.csv")).unwrap());

    let manifest = path(&built.join(MANIFEST_FILE));
    let again = path(&tmp.path().join("again"));
    let o = dualstress(&["replay", "--manifest", &manifest, "--out-dir", &again, "--threads", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // A recorded digest that no longer matches the rerun.
    let mut tampered: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    tampered.outputs[0].sha256 = "0".repeat(64);
    let tampered_path = tmp.path().join("tampered.json");
    std::fs::write(&tampered_path, serde_json::to_string(&tampered).unwrap()).unwrap();
    let o = dualstress(&["replay", "--manifest", &path(&tampered_path), "--out-dir", &again]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&tampered.outputs[0].path));

    // An input edited after the run.
    let cpi = data.join("cpi.csv");
    let mut text = std::fs::read_to_string(&cpi).unwrap();
    text.push('\n');
    std::fs::write(&cpi, text).unwrap();
    let o = dualstress(&["replay", "--manifest", &manifest, "--out-dir", &again]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("changed"));
}
