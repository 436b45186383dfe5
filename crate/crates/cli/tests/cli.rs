//! End-to-end tests driving the installed binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use remnist_core::formats::{
    read_idx_file, write_source_archive, DatasetBundle,
};
use remnist_core::preprocess::{preprocess_digit, CropConfig, Digit28, ResampleConfig};
use remnist_core::synth::{synthetic_archive, ArchiveSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_remnist"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text
        .lines()
        .find(|l| l.trim_start().starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON line in: {text}"));
    serde_json::from_str(line).expect("stdout JSON parses")
}

fn write_archive(path: &Path, spec: &ArchiveSpec) {
    let records = synthetic_archive(spec);
    let mut file = fs::File::create(path).unwrap();
    write_source_archive(&records, &mut file).unwrap();
}

/// A small on-disk dataset of preprocessed synthetic blobs.
fn write_dataset(dir: &Path, stem: &str, count: usize, seed: u64) -> DatasetBundle {
    let archive = synthetic_archive(&ArchiveSpec {
        test_writers: 1,
        test_digits_per_writer: count as u32,
        train_writers: 0,
        seed,
        ..ArchiveSpec::default()
    });
    let images: Vec<Digit28> = archive
        .iter()
        .map(|r| preprocess_digit(r, &CropConfig::default(), &ResampleConfig::default()).unwrap())
        .collect();
    let labels: Vec<u8> = archive.iter().map(|r| r.label).collect();
    let bundle = DatasetBundle::from_images_labels(images, labels).unwrap();
    fs::create_dir_all(dir).unwrap();
    bundle.write_idx_files(dir, stem, false).unwrap();
    bundle
}

fn read_dir_sorted(dir: &Path) -> Vec<PathBuf> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
}

#[test]
fn assemble_writer_only_archive_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let nbin = tmp.path().join("mini.nbin");
    write_archive(
        &nbin,
        &ArchiveSpec {
            test_writers: 20,
            test_digits_per_writer: 40,
            train_writers: 0,
            seed: 11,
            ..ArchiveSpec::default()
        },
    );
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(bin().args([
            "assemble",
            "--source",
            nbin.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--writer-split",
            "10",
            "--target",
            "400",
            "--seed",
            "42",
        ]));
    }
    let names: Vec<String> = read_dir_sorted(&out_a)
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"train-images-idx3-ubyte".to_string()));
    assert!(names.contains(&"test-labels-idx1-ubyte".to_string()));
    assert!(names.contains(&"report.json".to_string()));
    assert!(names.contains(&"manifest.json".to_string()));
    for name in &names {
        if name == "manifest.json" {
            continue; // paths inside differ between out dirs
        }
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let images = read_idx_file(out_a.join("train-images-idx3-ubyte")).unwrap();
    assert_eq!(images.dims(), &[400, 28, 28]);
}

#[test]
fn assemble_missing_source_exits_2_and_names_path() {
    let out = bin()
        .args([
            "assemble",
            "--source",
            "/nonexistent/archive.nbin",
            "--out",
            "/tmp/unused-assemble-out",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("/nonexistent/archive.nbin"),
        "stderr should name the path: {stderr}"
    );
}

#[test]
fn match_dataset_with_itself_reports_zero_distances() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let bundle = write_dataset(&data, "set", 12, 3);
    let out = tmp.path().join("match");
    let output = run_ok(bin().args([
        "match",
        "--a",
        data.to_str().unwrap(),
        "--b",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--pairs-csv",
    ]));
    let summary = stdout_json(&output);
    assert_eq!(summary["pairs"], 12);
    assert_eq!(summary["unmatched_a"], 0);
    assert_eq!(summary["jitter_histogram"]["zero_shift"], 12);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for pair in report["pairs"].as_array().unwrap() {
        assert_eq!(pair["distance"]["l2"], 0.0);
    }
    assert_eq!(report["l2_quartiles"]["max"], 0.0);

    let csv = fs::read_to_string(out.join("pairs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + bundle.len());
    assert!(csv.starts_with("index_a,index_b,l2,linf,dx,dy"));
}

#[test]
fn match_count_mismatch_needs_allow_partial() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    write_dataset(&d1, "set", 10, 5);
    write_dataset(&d2, "set", 8, 6);
    let out = bin()
        .args([
            "match",
            "--a",
            d1.to_str().unwrap(),
            "--b",
            d2.to_str().unwrap(),
            "--out",
            tmp.path().join("m").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--allow-partial"));

    run_ok(bin().args([
        "match",
        "--a",
        d1.to_str().unwrap(),
        "--b",
        d2.to_str().unwrap(),
        "--out",
        tmp.path().join("m2").to_str().unwrap(),
        "--allow-partial",
    ]));
}

#[test]
fn eval_knn_memorizes_its_training_set() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let bundle = write_dataset(&data, "set", 15, 9);
    let out = tmp.path().join("run");
    run_ok(bin().args([
        "eval",
        "knn",
        "--k",
        "1",
        "--train",
        data.to_str().unwrap(),
        "--test",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let error: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(error["n"], 15);
    assert_eq!(error["n1"], 0);
    assert_eq!(error["nu"], 0.0);

    let preds = fs::read_to_string(out.join("predictions.txt")).unwrap();
    let parsed: Vec<u8> = preds.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(parsed, bundle.labels());

    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["model_id"], "knn-k1");
    assert_eq!(run["prediction_path"], "predictions.txt");
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn eval_compare_identical_predictions_not_established() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    write_dataset(&data, "set", 10, 2);
    let run_dir = tmp.path().join("run");
    run_ok(bin().args([
        "eval",
        "knn",
        "--k",
        "1",
        "--train",
        data.to_str().unwrap(),
        "--test",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let preds = run_dir.join("predictions.txt");
    let truth = data.join("set-labels-idx1-ubyte");
    let output = run_ok(bin().args([
        "eval",
        "compare",
        "--a",
        preds.to_str().unwrap(),
        "--b",
        preds.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]));
    let json = stdout_json(&output);
    assert_eq!(json["decision"], "not_established");
    assert_eq!(json["n12"], 0);
    assert_eq!(json["n21"], 0);
}

#[test]
fn eval_scatter_builds_csv_from_run_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train");
    let t1 = tmp.path().join("t1");
    let t2 = tmp.path().join("t2");
    write_dataset(&train, "set", 20, 1);
    write_dataset(&t1, "set", 10, 2);
    write_dataset(&t2, "set", 10, 3);
    let runs: [(&str, &Path); 4] = [("1", &t1), ("1", &t2), ("3", &t1), ("3", &t2)];
    let mut run_files = Vec::new();
    for (i, (k, test)) in runs.iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        run_ok(bin().args([
            "eval",
            "knn",
            "--k",
            k,
            "--train",
            train.to_str().unwrap(),
            "--test",
            test.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        run_files.push(out.join("run.json"));
    }
    let out = tmp.path().join("scatter");
    let mut cmd = bin();
    cmd.args([
        "eval",
        "scatter",
        "--out",
        out.to_str().unwrap(),
    ]);
    for f in &run_files {
        cmd.arg(f);
    }
    run_ok(&mut cmd);
    let csv = fs::read_to_string(out.join("scatter.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header + two model rows: {csv}");
    assert!(lines[0].starts_with("model_id,error_set1,halfwidth1"));
    assert!(lines[1].starts_with("knn-k1,"));
    assert!(lines[2].starts_with("knn-k3,"));
}

#[test]
fn idx_info_and_slice() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    write_dataset(&data, "set", 9, 4);
    let labels = data.join("set-labels-idx1-ubyte");
    let output = run_ok(bin().args(["idx", "info", "--path", labels.to_str().unwrap()]));
    let info = stdout_json(&output);
    assert_eq!(info["dims"], serde_json::json!([9]));
    assert_eq!(info["dtype"], "u8");
    assert_eq!(info["elements"], 9);

    let sliced_path = tmp.path().join("sliced-labels-idx1-ubyte");
    run_ok(bin().args([
        "idx",
        "slice",
        "--path",
        labels.to_str().unwrap(),
        "--start",
        "2",
        "--count",
        "3",
        "--out",
        sliced_path.to_str().unwrap(),
    ]));
    let full = read_idx_file(&labels).unwrap();
    let sliced = read_idx_file(&sliced_path).unwrap();
    assert_eq!(sliced.dims(), &[3]);
    assert_eq!(sliced.as_u8().unwrap(), &full.as_u8().unwrap()[2..5]);
}

#[test]
fn preprocess_single_record_debug() {
    let tmp = tempfile::tempdir().unwrap();
    let nbin = tmp.path().join("mini.nbin");
    write_archive(
        &nbin,
        &ArchiveSpec {
            test_writers: 2,
            test_digits_per_writer: 3,
            train_writers: 0,
            seed: 8,
            ..ArchiveSpec::default()
        },
    );
    let out = tmp.path().join("digit");
    let output = run_ok(bin().args([
        "preprocess",
        "--source",
        nbin.to_str().unwrap(),
        "--index",
        "0",
        "--out",
        out.to_str().unwrap(),
        "--ascii",
    ]));
    let summary = stdout_json(&output);
    assert_eq!(summary["index"], 0);
    assert!(summary["ink_pixels"].as_u64().unwrap() > 0);
    let text = String::from_utf8_lossy(&output.stdout);
    assert_eq!(
        text.lines().filter(|l| l.len() == 28).count(),
        28,
        "ascii grid is 28 lines of 28 chars"
    );
    let images = read_idx_file(out.join("digit-images-idx3-ubyte")).unwrap();
    assert_eq!(images.dims(), &[1, 28, 28]);

    let bad = bin()
        .args([
            "preprocess",
            "--source",
            nbin.to_str().unwrap(),
            "--index",
            "99",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
