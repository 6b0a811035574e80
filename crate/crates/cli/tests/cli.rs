//! End-to-end tests of the command-line surface on tiny synthetic datasets.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stadv_core::data::{read_results, save_weights, write_results, ResultRecord};
use stadv_core::models::build_model;

fn stadv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stadv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Write a small real-format MNIST pair (images + labels) with deterministic
/// striped digits.
fn write_idx_dataset(dir: &Path, count: usize) {
    let mut images = Vec::new();
    images.extend_from_slice(&0x0803u32.to_be_bytes());
    images.extend_from_slice(&(count as u32).to_be_bytes());
    images.extend_from_slice(&28u32.to_be_bytes());
    images.extend_from_slice(&28u32.to_be_bytes());
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x0801u32.to_be_bytes());
    labels.extend_from_slice(&(count as u32).to_be_bytes());
    for i in 0..count {
        let class = i % 10;
        for u in 0..28 {
            for v in 0..28 {
                let lit = u / 3 == class && v % 2 == 0;
                images.push(if lit { 220 } else { (i * 7 % 40) as u8 });
            }
        }
        labels.push(class as u8);
    }
    std::fs::write(dir.join("train-images-idx3-ubyte"), &images).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), &labels).unwrap();
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), &images).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), &labels).unwrap();
}

fn save_untrained_model(dir: &Path, name: &str, tag: &str) -> PathBuf {
    let g = build_model(name, 5).unwrap();
    let path = dir.join(format!("{name}__{tag}.weights"));
    save_weights(&g, &path, None).unwrap();
    path
}

#[test]
fn train_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_idx_dataset(dir.path(), 40);
    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let o = stadv(&[
            "train",
            "--model",
            "A",
            "--data",
            dir.path().to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--epochs",
            "1",
            "--train-count",
            "32",
            "--test-count",
            "8",
            "--seed",
            "7",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out_dir.join("A__none.weights")).unwrap()
    };
    assert_eq!(run("r1"), run("r2"), "same seed must give identical weight files");
}

#[test]
fn train_reports_missing_dataset_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = stadv(&[
        "train",
        "--model",
        "A",
        "--data",
        "/nonexistent/mnist",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/mnist"), "{}", stderr(&o));
}

#[test]
fn ensemble_without_sources_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let o = stadv(&[
        "train",
        "--model",
        "A",
        "--data",
        "/nonexistent/mnist",
        "--adv",
        "ensemble",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    // argument validation fires before the bad path is touched
    assert!(stderr(&o).contains("--source-models"), "{}", stderr(&o));
}

#[test]
fn unknown_method_and_defense_fail_fast() {
    let o = stadv(&["attack", "--method", "ddn", "--model", "A", "--weights", "x", "--data", "y", "--out", "z"]);
    assert!(!o.status.success());
    let o = stadv(&["defend", "--defense", "distill", "--model", "A", "--weights-dir", "x", "--data", "y", "--out", "z"]);
    assert!(!o.status.success());
}

#[test]
fn attack_with_zero_inputs_writes_empty_results_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    write_idx_dataset(dir.path(), 20);
    let weights = save_untrained_model(dir.path(), "A", "none");
    let out_dir = dir.path().join("run");
    let o = stadv(&[
        "attack",
        "--model",
        "A",
        "--weights",
        weights.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--method",
        "fgsm",
        "--n",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_results(&out_dir.join("results.ndjson")).unwrap();
    assert!(records.is_empty());
}

#[test]
fn attack_summary_matches_results_file_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    write_idx_dataset(dir.path(), 30);
    let weights = save_untrained_model(dir.path(), "A", "none");
    let out_dir = dir.path().join("run");
    let o = stadv(&[
        "attack",
        "--model",
        "A",
        "--weights",
        weights.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--method",
        "fgsm",
        "--eps",
        "0.2",
        "--n",
        "3",
        "--seed",
        "11",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let records = read_results(&out_dir.join("results.ndjson")).unwrap();
    assert!(!records.is_empty());
    let successes = records.iter().filter(|r| r.success).count();
    let rate = 100.0 * successes as f64 / records.len() as f64;
    assert!(
        text.contains(&format!("{rate:.1}%")),
        "summary '{text}' must contain recomputed rate {rate:.1}%"
    );
    // indices are sorted in the file
    let idx: Vec<_> = records.iter().map(|r| r.input_index.unwrap()).collect();
    let mut sorted = idx.clone();
    sorted.sort();
    assert_eq!(idx, sorted);
}

#[test]
fn viz_on_identity_attack_makes_bit_identical_montage_halves() {
    let dir = tempfile::tempdir().unwrap();
    write_idx_dataset(dir.path(), 20);
    let weights = save_untrained_model(dir.path(), "A", "none");
    let out_dir = dir.path().join("run");
    // epsilon 0 leaves the adversarial image equal to the benign one
    let o = stadv(&[
        "attack",
        "--model",
        "A",
        "--weights",
        weights.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--method",
        "fgsm",
        "--eps",
        "0",
        "--n",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = stadv(&["viz", "--run-dir", out_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let viz_dir = out_dir.join("viz");
    let mut montages: Vec<_> = std::fs::read_dir(&viz_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    montages.sort();
    assert!(!montages.is_empty());
    for m in montages {
        let img = stadv_core::data::import_image(&m).unwrap();
        let half = img.width / 2;
        for u in 0..img.height {
            for v in 0..half {
                assert_eq!(img.get(0, u, v), img.get(0, u, half + v), "montage halves differ");
            }
        }
    }
}

#[test]
fn metrics_on_a_zero_flow_record_prints_zero_plus_minus_zero() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.ndjson");
    let record = ResultRecord {
        record: "outcome".into(),
        method: "stadv".into(),
        model: "A".into(),
        defense: "none".into(),
        input_index: Some(0),
        true_class: Some(3),
        target: Some(5),
        success: true,
        flow_tv: Some(0.0),
        flow_l2: Some(0.0),
        tau: Some(0.05),
        seed: 7,
        wall_ms: 1.0,
    };
    write_results(&[record], &results).unwrap();
    let o = stadv(&["metrics", "--results", results.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("flow TV  0.000e0 \u{b1} 0.000e0"), "{text}");
    assert!(text.contains("flow L2  0.000e0 \u{b1} 0.000e0"), "{text}");
}

#[test]
fn defend_none_reproduces_raw_rates_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    write_idx_dataset(dir.path(), 30);
    save_untrained_model(dir.path(), "A", "none");
    let out_dir = dir.path().join("def");
    let o = stadv(&[
        "defend",
        "--model",
        "A",
        "--weights-dir",
        dir.path().to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--defense",
        "none",
        "--methods",
        "fgsm",
        "--n",
        "3",
        "--eps",
        "0.2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("defense_A_none.json")).unwrap())
            .unwrap();
    let rows = report["report"]["per_attack"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    let rate = rows[0]["attack_success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert!(report["run_config"]["seed"].is_number());
}
