//! End-to-end command tests: synthetic corpus generation, training, lexicon
//! extraction, informativeness scoring and comparison through the binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn deconflex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deconflex"))
        .args(args)
        .output()
        .expect("spawn deconflex")
}

fn assert_ok(output: &Output, what: &str) {
    assert!(
        output.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Map of relative path -> file bytes for a directory tree.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn synth_runs_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    for dir in [&a, &b] {
        let out = deconflex(&[
            "synth",
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            "7",
            "--n-docs",
            "60",
        ]);
        assert_ok(&out, "synth");
    }
    // run_config.json records the differing --out paths; every corpus file
    // must match byte for byte.
    let mut snap_a = snapshot(&a);
    let mut snap_b = snapshot(&b);
    snap_a.remove("run_config.json");
    snap_b.remove("run_config.json");
    assert_eq!(snap_a.len(), snap_b.len());
    assert!(snap_a.keys().any(|k| k.ends_with(".json")));
    for (path, bytes) in &snap_a {
        assert_eq!(Some(bytes), snap_b.get(path), "file {path} differs between runs");
    }
}

#[test]
fn pipeline_from_synth_to_comparison() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("corpus");
    let cache = root.path().join("cache");
    let out = deconflex(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--n-docs",
        "300",
    ]);
    assert_ok(&out, "synth");

    // Ingest emits the cleaning report.
    let ingest_out = root.path().join("ingest");
    let out = deconflex(&[
        "ingest",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ingest_out.to_str().unwrap(),
    ]);
    assert_ok(&out, "ingest");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(ingest_out.join("cleaning_report.json")).unwrap()).unwrap();
    for key in ["removed_empty", "removed_duplicates", "repaired_meta"] {
        assert!(report.get(key).is_some(), "cleaning report missing {key}");
    }
    assert!(ingest_out.join("run_config.json").exists());

    // Train the plain bag-of-words model and its residualised counterpart.
    let nc_dir = root.path().join("nc");
    let out = deconflex(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--task",
        "individual",
        "--arch",
        "bow-linear",
        "--out",
        nc_dir.to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
        "--epochs",
        "60",
        "--patience",
        "60",
        "--lr",
        "0.003",
        "--dropout",
        "0.0",
        "--min-freq",
        "1",
        "--seed",
        "1",
    ]);
    assert_ok(&out, "train nc");
    assert!(nc_dir.join("params.bin").exists());
    assert!(nc_dir.join("metrics.json").exists());

    let dr_dir = root.path().join("dr");
    let out = deconflex(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--task",
        "individual",
        "--arch",
        "bow-linear",
        "--dr",
        "--out",
        dr_dir.to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
        "--epochs",
        "60",
        "--patience",
        "60",
        "--lr",
        "0.003",
        "--dropout",
        "0.0",
        "--min-freq",
        "1",
        "--seed",
        "1",
    ]);
    assert_ok(&out, "train dr");
    let spec: serde_json::Value =
        serde_json::from_slice(&fs::read(dr_dir.join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec["variant"], "bow");

    // Extract both lexicons.
    let lex_nc_dir = root.path().join("lex_nc");
    let out = deconflex(&[
        "explain",
        "--checkpoint",
        nc_dir.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--task",
        "individual",
        "--k",
        "20",
        "--min-count",
        "1",
        "--out",
        lex_nc_dir.to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
    ]);
    assert_ok(&out, "explain nc");
    let lex_nc_path = lex_nc_dir.join("lexicon.jsonl");
    let nc_lines = fs::read_to_string(&lex_nc_path).unwrap();
    assert!(nc_lines.lines().count() <= 20, "lexicon exceeds k lines");

    let lex_dr_dir = root.path().join("lex_dr");
    let out = deconflex(&[
        "explain",
        "--checkpoint",
        dr_dir.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--task",
        "individual",
        "--k",
        "20",
        "--min-count",
        "1",
        "--out",
        lex_dr_dir.to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
    ]);
    assert_ok(&out, "explain dr");
    let lex_dr_path = lex_dr_dir.join("lexicon.jsonl");

    // Informativeness over both lexicons in one batch (comparison table).
    let il_dir = root.path().join("il");
    let out = deconflex(&[
        "informativeness",
        "--lexicon",
        lex_nc_path.to_str().unwrap(),
        "--lexicon",
        lex_dr_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--task",
        "individual",
        "--out",
        il_dir.to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
    ]);
    assert_ok(&out, "informativeness");
    let reports: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(il_dir.join("il_report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert!(r["i_l"].is_number());
        assert!(r["bce_c"].is_number());
        assert!(r["f1_both"].is_number());
    }
    assert!(il_dir.join("il_table.txt").exists());

    // Side-by-side comparison with planted ground truth.
    let cmp_dir = root.path().join("cmp");
    let out = deconflex(&[
        "compare",
        "--lexicon-a",
        lex_nc_path.to_str().unwrap(),
        "--lexicon-b",
        lex_dr_path.to_str().unwrap(),
        "--ground-truth",
        data.join("ground_truth.json").to_str().unwrap(),
        "--out",
        cmp_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "compare");
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("contamination"), "comparison lacks contamination row:\n{table}");
    assert!(cmp_dir.join("compare.txt").exists());
}

#[test]
fn invalid_data_dir_exits_nonzero_with_single_line_diagnostic() {
    let out = deconflex(&[
        "ingest",
        "--data",
        "/nonexistent/deconflex-data",
        "--out",
        tempfile::tempdir().unwrap().path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let diag_lines = stderr.lines().filter(|l| l.starts_with("error:")).count();
    assert_eq!(diag_lines, 1, "expected one diagnostic line, got:\n{stderr}");
}

#[test]
fn lock_file_blocks_concurrent_writers() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".deconflex.lock"), b"").unwrap();
    let out = deconflex(&[
        "synth",
        "--out",
        out_dir.to_str().unwrap(),
        "--n-docs",
        "10",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}
