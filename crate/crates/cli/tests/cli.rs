use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddfm"))
}

fn config_json(seed: u64) -> Value {
    serde_json::json!({
        "seed": seed,
        "output_dir": "unused",
        "vocab_size": 4,
        "seq_len": 3,
        "prefix_len": 1,
        "clusters": 2,
        "repetitions": 2,
        "router": { "temperature": 10.0, "top_k": 1 },
        "kmeans": { "method": "balanced", "k_fine": 8, "max_iters": 30 },
        "expert": { "order": 1, "alpha": 0.1 },
        "corpus": {
            "samples": 120,
            "heldout": 60,
            "feature_dim": 4,
            "topics": 2,
            "blob_separation": 1.0,
            "blob_noise": 0.2,
            "text_only_fraction": 0.1,
            "concentration": 0.5
        }
    })
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &config_json(3));
    let out = dir.path().join("verify");
    let o = run(&["verify", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "verify");
    assert!(out.join("checks.csv").exists());
    assert!(out.join("decentral.csv").exists());
    assert!(out.join("run_meta.json").exists());
}

#[test]
fn experiment_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &config_json(5));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "experiment",
            "--config",
            s(&config),
            "--out",
            s(out),
            "--format",
            "csv",
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for file in [
        "report.json",
        "metrics.csv",
        "clusters.csv",
        "tau_sweep.csv",
        "checks.csv",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }
    let c = dir.path().join("c");
    run(&[
        "experiment",
        "--config",
        s(&config),
        "--out",
        s(&c),
        "--seed",
        "6",
    ]);
    assert_ne!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(c.join("report.json")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut missing = config_json(1);
    missing["router"].as_object_mut().unwrap().remove("top_k");
    let path = write_config(dir.path(), &missing);
    assert_eq!(
        run(&["verify", "--config", s(&path)]).status.code(),
        Some(2)
    );

    let mut unknown = config_json(1);
    unknown["surprise"] = Value::Bool(true);
    let path = write_config(dir.path(), &unknown);
    assert_eq!(
        run(&["verify", "--config", s(&path)]).status.code(),
        Some(2)
    );

    let mut out_of_range = config_json(1);
    out_of_range["router"]["top_k"] = 3.into();
    let path = write_config(dir.path(), &out_of_range);
    assert_eq!(
        run(&["experiment", "--config", s(&path)]).status.code(),
        Some(2)
    );

    assert_eq!(run(&["verify"]).status.code(), Some(2));
    assert_eq!(
        run(&["verify", "--config", s(&dir.path().join("nope.json"))])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn failed_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &config_json(2));
    let out = dir.path().join("v");
    assert_eq!(
        run(&["verify", "--config", s(&config), "--out", s(&out)])
            .status
            .code(),
        Some(0)
    );
    let path = out.join("report.json");
    let mut report: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    let check = &mut report["checks"][0];
    check["value"] = 2e-12.into();
    check["passed"] = false.into();
    fs::write(&path, report.to_string()).unwrap();
    let o = run(&["report", s(&path), "--format", "csv"]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("name,hard,passed,value"));
    assert!(text.contains("ar_continuity_residual,true,false,2e-12"));
}

#[test]
fn synth_cluster_train_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &config_json(9));
    let d = dir.path().join("work");
    let ok = |args: &[&str]| {
        let o = run(args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        o
    };
    ok(&["synth", "--config", s(&config), "--out", s(&d)]);
    ok(&[
        "cluster",
        "--config",
        s(&config),
        "--out",
        s(&d),
        "--features",
        s(&d.join("features.txt")),
        "--ids",
        s(&d.join("features.ids")),
    ]);
    let assignments = fs::read_to_string(d.join("assignments.csv")).unwrap();
    assert!(assignments.starts_with("item_id,cluster_id\n"));
    ok(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&d),
        "--corpus",
        s(&d.join("corpus.json")),
        "--assignments",
        s(&d.join("assignments.csv")),
    ]);
    assert!(d.join("expert_1.model").exists());
    assert!(d.join("dense.model").exists());
    let o = ok(&[
        "infer",
        "--config",
        s(&config),
        "--models",
        s(&d),
        "--centroids",
        s(&d.join("centroids.txt")),
        "--prefix",
        "0 1",
        "--features",
        "1,0,0,0",
    ]);
    let result: Value = serde_json::from_slice(&o.stdout).unwrap();
    let routed: Vec<f64> = serde_json::from_value(result["routed"].clone()).unwrap();
    assert_eq!(routed.len(), 4);
    assert!((routed.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    // A tampered model is rejected as an input error.
    let model = d.join("expert_0.model");
    let text = fs::read_to_string(&model)
        .unwrap()
        .replacen("order 1", "order 2", 1);
    fs::write(&model, text).unwrap();
    let o = run(&[
        "infer",
        "--config",
        s(&config),
        "--models",
        s(&d),
        "--centroids",
        s(&d.join("centroids.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_feature_matrix_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &config_json(1));
    let features = dir.path().join("f.txt");
    fs::write(&features, "3 2\n1 0\n0 1\n").unwrap();
    let o = run(&[
        "cluster",
        "--config",
        s(&config),
        "--features",
        s(&features),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
