use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use egobench::eval::{federated_ap_category, instance_ap, EvalConfig};
use egobench::schema::{load_dataset, load_predictions, LabelSpace};
use egobench::splits::load_splits;
use egobench::{Exec, PredictionMode};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn demo(name: &str) -> PathBuf {
    fixture("demo").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egobench"))
        .args(args)
        .env_remove("EGOBENCH_THREADS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_exit_codes() {
    let ok = run(&["validate", "--dataset", s(&demo("dataset.json"))]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("ok"));

    let bad = run(&["validate", "--dataset", s(&demo("contradictory.json"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("NEG_CONTRADICTION"));
}

#[test]
fn usage_and_io_errors_exit_2() {
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["validate"]).status.code(), Some(2));
    assert_eq!(
        run(&["validate", "--dataset", "/nonexistent/d.json"]).status.code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{\"categories\": [}").unwrap();
    let o = run(&["validate", "--dataset", s(&broken)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    // instance mode needs a split
    let o = run(&[
        "eval",
        "instance",
        "--dataset",
        s(&demo("dataset.json")),
        "--preds",
        s(&demo("preds_instance.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    // category predictions under instance mode are a format error
    let o = run(&[
        "eval",
        "instance",
        "--dataset",
        s(&demo("dataset.json")),
        "--preds",
        s(&demo("preds_category.json")),
        "--splits",
        s(&demo("splits.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in [
        "validate",
        "coverage",
        "consensus",
        "split",
        "eval",
        "stats",
        "kernels",
        "match",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
    assert!(text.contains("EGOBENCH_THREADS"));
}

#[test]
fn coverage_reports_missing_slots() {
    assert_eq!(
        run(&["coverage", "--dataset", s(&demo("dataset.json"))]).status.code(),
        Some(0)
    );

    let dir = tempfile::tempdir().unwrap();
    let mut d: serde_json::Value = serde_json::from_str(&fs::read_to_string(demo("dataset.json")).unwrap()).unwrap();
    d["videos"][2]["lighting"] = "bright".into();
    let path = dir.path().join("d.json");
    fs::write(&path, d.to_string()).unwrap();
    let out = dir.path().join("cov.json");
    let o = run(&["coverage", "--dataset", s(&path), "--instance", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    // video 3 now duplicates slot 1, leaving slot 3 empty
    assert_eq!(report[0]["slots"][0]["video_ids"], serde_json::json!([1, 3]));
    assert_eq!(report[0]["slots"][2]["video_ids"], serde_json::json!([]));
    assert!(stdout(&o).contains(" 3  "));
}

#[test]
fn consensus_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    let o = run(&[
        "consensus",
        "--dataset",
        s(&demo("multi_annotator.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let mut r = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    // annotators 1 and 2 agree exactly; the tie goes to the lower id
    let winners: Vec<&str> = rows.iter().filter(|r| &r[3] == "true").map(|r| &r[1]).collect();
    assert_eq!(winners, ["1", "1"]);
    assert_eq!(&rows[0][2], &rows[1][2]);
}

#[test]
fn split_build_check_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a.json"),
        dir.path().join("b.json"),
        dir.path().join("c.json"),
    );
    let d = demo("dataset.json");
    for (out, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        let o = run(&[
            "split",
            "--dataset",
            s(&d),
            "--mode",
            "instdet",
            "--seed",
            seed,
            "--out",
            s(out),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(
        run(&["split", "--dataset", s(&d), "--check", s(&a)]).status.code(),
        Some(0)
    );

    // leak a test image into train
    let mut spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    let img = spec["test_images"][0].clone();
    spec["train_images"].as_array_mut().unwrap().push(img);
    fs::write(&a, spec.to_string()).unwrap();
    let o = run(&["split", "--dataset", s(&d), "--check", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("OVERLAPPING_SPLITS"));
    assert!(stdout(&o).contains("LEAKED_INSTANCE"));
}

#[test]
fn category_report_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let table = dir.path().join("r.csv");
    let o = run(&[
        "eval",
        "category",
        "--dataset",
        s(&demo("dataset.json")),
        "--preds",
        s(&demo("preds_category.json")),
        "--buckets",
        "--out",
        s(&out),
        "--csv",
        s(&table),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let d = load_dataset(demo("dataset.json")).unwrap();
    let p = load_predictions(
        demo("preds_category.json"),
        PredictionMode::Category,
        &d,
        LabelSpace::Dataset,
    )
    .unwrap();
    let cfg = EvalConfig {
        buckets: true,
        ..EvalConfig::default()
    };
    let r = federated_ap_category(&d, &p, &cfg, &Exec::Sequential).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), format!("{}\n", r.to_json()));
    assert!(stdout(&o).contains(&format!("AP          {:.2}", r.ap * 100.0)));
    let rows = csv::Reader::from_path(&table).unwrap().records().count();
    assert_eq!(rows, r.num_units);
}

#[test]
fn instance_report_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&[
        "eval",
        "instance",
        "--dataset",
        s(&demo("dataset.json")),
        "--preds",
        s(&demo("preds_instance.json")),
        "--splits",
        s(&demo("splits.json")),
        "--iou-thresholds",
        "0.5,0.75",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let d = load_dataset(demo("dataset.json")).unwrap();
    let spec = load_splits(demo("splits.json")).unwrap();
    let reg = spec.eval_instances();
    let p = load_predictions(
        demo("preds_instance.json"),
        PredictionMode::Instance,
        &d,
        LabelSpace::Registry(&reg),
    )
    .unwrap();
    let cfg = EvalConfig {
        iou_thresholds: vec![0.5, 0.75],
        ..EvalConfig::default()
    };
    let r = instance_ap(&d, &p, &spec, &cfg, &Exec::Sequential).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), format!("{}\n", r.to_json()));
    assert!(stdout(&o).contains("AP50_unseen"));
}

#[test]
fn invalid_thresholds_exit_2() {
    let o = run(&[
        "eval",
        "category",
        "--dataset",
        s(&demo("dataset.json")),
        "--preds",
        s(&demo("preds_category.json")),
        "--iou-thresholds",
        "0.75,0.5",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cl_precomputed_table() {
    let o = run(&["eval", "cl", "--stream", s(&fixture("cl_category_rank1.json"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("EAP 55.92"));
}

#[test]
fn cl_scores_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cl.json");
    let o = run(&[
        "eval",
        "cl",
        "--stream",
        s(&demo("stream_category.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let maps: Vec<f64> = report["per_experience_map"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(maps.len(), 3);
    // the last checkpoint uses the full prediction file
    let d = load_dataset(demo("dataset.json")).unwrap();
    let p = load_predictions(
        demo("preds_category.json"),
        PredictionMode::Category,
        &d,
        LabelSpace::Dataset,
    )
    .unwrap();
    let full = federated_ap_category(&d, &p, &EvalConfig::default(), &Exec::Sequential).unwrap();
    assert_eq!(maps[2], full.ap * 100.0);
    let mean = maps.iter().sum::<f64>() / 3.0;
    assert_eq!(report["EAP"].as_f64().unwrap(), mean);

    // explicit prediction directory with missing files
    let o = run(&[
        "eval",
        "cl",
        "--stream",
        s(&demo("stream_category.json")),
        "--preds-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "stats",
        "--dataset",
        s(&demo("dataset.json")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    for f in [
        "categories",
        "centers_main",
        "centers_all",
        "sizes_main",
        "sizes_all",
        "metadata",
        "summary",
    ] {
        assert!(dir.path().join(format!("{f}.csv")).exists(), "{f}");
    }
    let mut r = csv::Reader::from_path(dir.path().join("categories.csv")).unwrap();
    let total: u64 = r.records().map(|r| r.unwrap()[3].parse::<u64>().unwrap()).sum();
    assert_eq!(total, 110);
    let centers = csv::Reader::from_path(dir.path().join("centers_all.csv"))
        .unwrap()
        .records()
        .count();
    assert_eq!(centers, 50 * 50);
    let mut m = csv::Reader::from_path(dir.path().join("metadata.csv")).unwrap();
    let lighting: u64 = m
        .records()
        .map(Result::unwrap)
        .filter(|r| &r[0] == "lighting")
        .map(|r| r[2].parse::<u64>().unwrap())
        .sum();
    assert_eq!(lighting, 30);
}

#[test]
fn kernels_selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k.json");
    let o = run(&["kernels", "selftest", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("FAIL"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(r["gradients"].as_array().unwrap().len(), 7);
}

#[test]
fn match_writes_instance_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.json");
    let props = dir.path().join("props.json");
    let out = dir.path().join("preds.json");
    fs::write(
        &refs,
        r#"[{"instance_id": 3, "embedding": [1, 0, 0]}, {"instance_id": 5, "embedding": [0, 1, 0]}, {"instance_id": 5, "embedding": [0, 1, 0.2]}]"#,
    )
    .unwrap();
    fs::write(
        &props,
        r#"[{"image_id": 1, "bbox": [0, 0, 10, 10], "score": 0.8, "embedding": [2, 0.1, 0]},
            {"image_id": 2, "bbox": [5, 5, 10, 10], "score": 0.5, "embedding": [0, 0, 1]},
            {"image_id": 2, "bbox": [5, 5, 20, 20], "score": 0.9, "embedding": [0.1, 1, 0]}]"#,
    )
    .unwrap();
    let o = run(&[
        "match",
        "--embeddings",
        s(&refs),
        "--proposals",
        s(&props),
        "--threshold",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let preds: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    let preds = preds.as_array().unwrap();
    assert_eq!(preds.len(), 2);
    assert_eq!(preds[0]["instance_id"], 3);
    assert_eq!(preds[1]["instance_id"], 5);
    assert!(preds[1]["score"].as_f64().unwrap() <= 0.9);
}

#[test]
fn threads_env_fallback_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("r{threads}.json"));
        let o = Command::new(env!("CARGO_BIN_EXE_egobench"))
            .args([
                "eval",
                "category",
                "--dataset",
                s(&demo("dataset.json")),
                "--preds",
                s(&demo("preds_category.json")),
                "--buckets",
                "--out",
                s(&out),
            ])
            .env("EGOBENCH_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        outputs.push(fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
