use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ntk_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntk-lab"))
        .args(args)
        .env_remove("NTK_LAB_SEED")
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("error report is JSON")
}

/// Every file under `dir` except the manifest, which carries wall times.
fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn schema_command_prints_json() {
    let out = ntk_lab(&["schema"]);
    assert!(out.status.success());
    let schema: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(schema["required"][0], "kind");
}

#[test]
fn presets_are_listed() {
    let out = ntk_lab(&["run", "--list-presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "figC2-two-layer-theory"));
    assert_eq!(text.lines().count(), ntk_lab::presets::names().len());
}

#[test]
fn bad_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        r#"{"kind":"simulate","network":{"hidden":[4],"activation":"relu","sigma":0.1,"width":3}}"#,
    )
    .unwrap();
    let out = ntk_lab(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "schema");
    assert_eq!(err["path"], "network.width");
}

#[test]
fn zero_jobs_and_missing_source_are_rejected() {
    let out = ntk_lab(&["run", "--preset", "figC2-two-layer-theory", "--jobs", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ntk_lab(&["run"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "schema");
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = ntk_lab(&["run", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_json(&out)["error"], "io");
}

#[test]
fn preset_run_writes_parseable_csvs_and_repeats_exactly() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    for dir in [&a, &b] {
        let out = ntk_lab(&["run", "--preset", "figC2-two-layer-theory", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let line: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(line["out"], dir.display().to_string());
    }
    let (fa, fb) = (data_files(&a), data_files(&b));
    assert_eq!(fa, fb);

    let csvs: Vec<_> = fa.iter().filter(|(name, _)| name.ends_with(".csv")).collect();
    assert!(!csvs.is_empty());
    for (name, bytes) in csvs {
        let text = std::str::from_utf8(bytes).unwrap();
        let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
        let width = text.lines().next().unwrap().split(',').count();
        assert!(rows.iter().all(|r| r.len() == width), "{name}");
        // A column holds numbers throughout or labels throughout.
        for c in 0..width {
            let numeric = rows.iter().filter(|r| r[c].parse::<f64>().is_ok()).count();
            assert!(numeric == 0 || numeric == rows.len(), "{name} column {c}");
        }
    }

    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["run_id"].is_string());
}

#[test]
fn compare_reports_every_cell() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    let out = ntk_lab(&["run", "--preset", "fig1-mlp", "--out", dir.to_str().unwrap(), "--jobs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = ntk_lab(&["compare", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let cells: Value = serde_json::from_slice(&out.stdout).unwrap();
    let cells = cells.as_array().unwrap();
    assert!(!cells.is_empty());
    for c in cells {
        assert!(c["report"]["pairs"].as_array().unwrap().len() >= 3);
    }
}
