use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn csnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csnn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// 12-cycle plus two chords, two classes, three features.
fn small_graph() -> Value {
    let n = 12;
    let mut edges: Vec<[usize; 2]> = (0..n).map(|i| [i, (i + 1) % n]).collect();
    edges.push([0, 6]);
    edges.push([3, 9]);
    let features: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![(i as f64 * 0.7).sin(), (i % 3) as f64, if i % 2 == 0 { 1.0 } else { -0.5 }])
        .collect();
    let labels: Vec<i64> = (0..n).map(|i| (i % 2) as i64).collect();
    json!({
        "num_nodes": n,
        "edges": edges,
        "features": features,
        "labels": labels,
        "splits": [{"train": [0, 1, 2, 3, 4, 5], "val": [6, 7, 8], "test": [9, 10, 11]}],
        "metric": "accuracy"
    })
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("graph.json");
    write_json(&data, &small_graph());
    Fixture { _dir: dir, root, data }
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_errors_exit_with_one() {
    let f = fixture();
    assert_eq!(code(&csnn(&[], &f.root)), 1);
    assert_eq!(code(&csnn(&["frobnicate"], &f.root)), 1);
    assert_eq!(code(&csnn(&["train", "--bogus"], &f.root)), 1);
    assert_eq!(code(&csnn(&["--help"], &f.root)), 0);
}

#[test]
fn train_writes_metrics_checkpoint_and_effective_config() {
    let f = fixture();
    let cfg = f.root.join("cfg.json");
    write_json(&cfg, &json!({"stalk_dim": 2, "hidden_channels": 4, "num_layers": 1, "epochs": 9, "lr": 0.05, "eval_every": 3}));
    let out = f.root.join("run");
    let o = csnn(
        &["train", "--config", "cfg.json", "--data", "graph.json", "--split", "0", "--seed", "5", "--out", "run", "--epochs", "6"],
        &f.root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let effective: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(effective["epochs"], 6, "flag overrides file");
    assert_eq!(effective["lr"], 0.05);
    assert_eq!(effective["seed"], 5);
    assert_eq!(effective["stalk_dim"], 2);
    assert_eq!(effective["input_dim"], 3);
    assert_eq!(effective["num_classes"], 2);

    let records = read_lines(&out.join("metrics.jsonl"));
    let epochs: Vec<u64> = records.iter().map(|r| r["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, vec![0, 3, 6]);
    for r in &records {
        for key in ["epoch", "train_loss", "val_metric", "test_metric"] {
            assert!(r.get(key).is_some(), "missing {key} in {r}");
        }
    }

    let ckpt: Value = serde_json::from_str(&fs::read_to_string(out.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["format"], "csnn-checkpoint");
    assert_eq!(ckpt["version"], 1);
    assert_eq!(ckpt["config"]["hidden_channels"], 4);

    // the echoed config reproduces the run byte for byte
    let o = csnn(&["train", "--config", "run/config.json", "--data", "graph.json", "--out", "again"], &f.root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(out.join("metrics.jsonl")).unwrap(),
        fs::read(f.root.join("again/metrics.jsonl")).unwrap()
    );
}

#[test]
fn train_writes_only_under_out() {
    let f = fixture();
    let data_dir = tempfile::tempdir().unwrap();
    let data = data_dir.path().join("g.json");
    fs::copy(&f.data, &data).unwrap();
    let work = tempfile::tempdir().unwrap();
    let o = csnn(
        &["train", "--data", data.to_str().unwrap(), "--out", "nested/run", "--epochs", "2", "--hidden-channels", "2"],
        work.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let top: Vec<_> = fs::read_dir(work.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, vec!["nested"]);
    let mut files: Vec<_> = fs::read_dir(work.path().join("nested/run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["checkpoint.json", "config.json", "metrics.jsonl", "summary.json"]);
    let data_files: Vec<_> = fs::read_dir(data_dir.path()).unwrap().collect();
    assert_eq!(data_files.len(), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let f = fixture();
    let o = csnn(&["train", "--data", "missing.json", "--out", "run"], &f.root);
    assert_eq!(code(&o), 2);

    let mut bad = small_graph();
    bad["edges"][3] = json!([3, 40]);
    write_json(&f.root.join("bad.json"), &bad);
    let o = csnn(&["train", "--data", "bad.json", "--out", "run"], &f.root);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("edges[3]"));

    fs::write(f.root.join("trunc.json"), "{\"num_nodes\": 3, \"edges\": [").unwrap();
    assert_eq!(code(&csnn(&["train", "--data", "trunc.json", "--out", "run"], &f.root)), 2);
}

#[test]
fn bad_config_is_a_usage_error() {
    let f = fixture();
    write_json(&f.root.join("cfg.json"), &json!({"stalk_dimension": 3}));
    let o = csnn(&["train", "--config", "cfg.json", "--data", "graph.json", "--out", "run"], &f.root);
    assert_eq!(code(&o), 1);
    let o = csnn(&["train", "--data", "graph.json", "--out", "run", "--split", "4"], &f.root);
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_neighborsmatch_depth_two_has_seven_node_trees() {
    let f = fixture();
    let o = csnn(&["dataset", "gen-neighborsmatch", "--depth", "2", "--out", "nm/d2.json", "--num-examples", "10"], &f.root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ds: Value = serde_json::from_str(&fs::read_to_string(f.root.join("nm/d2.json")).unwrap()).unwrap();
    assert_eq!(ds["num_nodes"], 70);
    assert_eq!(ds["edges"].as_array().unwrap().len(), 60);
    let split = &ds["splits"][0];
    let roots: Vec<u64> = ["train", "test"]
        .iter()
        .flat_map(|k| split[*k].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .collect();
    assert_eq!(roots.len(), 10);
    assert!(roots.iter().all(|r| r % 7 == 0));
    assert_eq!(ds["metadata"]["depth"], 2);

    assert_eq!(code(&csnn(&["dataset", "gen-neighborsmatch", "--depth", "0", "--out", "x.json"], &f.root)), 1);
}

#[test]
fn laplacian_dump_trivial_sheaf_is_graph_laplacian() {
    let f = fixture();
    write_json(
        &f.root.join("edge.json"),
        &json!({"num_nodes": 2, "edges": [[0, 1]], "features": [[1.0], [0.0]], "labels": [0, 1],
                "splits": [{"train": [0], "val": [], "test": [1]}], "metric": "accuracy"}),
    );
    for (which, expected) in [
        ("out", json!([[1.0, -1.0], [-1.0, 1.0]])),
        ("in_t", json!([[1.0, -1.0], [-1.0, 1.0]])),
        ("composed", json!([[2.0, -2.0], [-2.0, 2.0]])),
    ] {
        let path = format!("dump-{which}.json");
        let o = csnn(
            &["laplacian", "dump", "--data", "edge.json", "--sheaf", "trivial", "--which", which, "--out", &path],
            &f.root,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let dump: Value = serde_json::from_str(&fs::read_to_string(f.root.join(&path)).unwrap()).unwrap();
        assert_eq!(dump["data"], expected, "{which}");
        assert_eq!(dump["rows"], 2);
    }
}

#[test]
fn laplacian_dump_from_checkpoint() {
    let f = fixture();
    let o = csnn(
        &["train", "--data", "graph.json", "--out", "run", "--epochs", "2", "--stalk-dim", "2", "--hidden-channels", "2"],
        &f.root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = csnn(
        &["laplacian", "dump", "--data", "graph.json", "--sheaf", "run/checkpoint.json", "--which", "out", "--out", "d.json"],
        &f.root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dump: Value = serde_json::from_str(&fs::read_to_string(f.root.join("d.json")).unwrap()).unwrap();
    assert_eq!(dump["rows"], 24);
    assert_eq!(dump["normalized"], true);
    let o = csnn(
        &["laplacian", "dump", "--data", "graph.json", "--sheaf", "run/checkpoint.json", "--which", "out", "--out", "d.json", "--layer", "7"],
        &f.root,
    );
    assert_eq!(code(&o), 1);
    let o = csnn(
        &["laplacian", "dump", "--data", "graph.json", "--sheaf", "nothing.json", "--which", "out", "--out", "d.json"],
        &f.root,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_props_passes() {
    let f = fixture();
    let o = csnn(&["verify", "props", "--seed", "3"], &f.root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["seed"], 3);
    assert_eq!(report["suites"].as_array().unwrap().len(), 7);
}

#[test]
fn sweep_records_one_line_per_run() {
    let f = fixture();
    let o = csnn(
        &["neighborsmatch-sweep", "--depths", "1..2", "--models", "gcn", "--out", "sweep", "--epochs", "3", "--num-examples", "10"],
        &f.root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = read_lines(&f.root.join("sweep/summary.jsonl"));
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["depth"], 2);
    assert_eq!(lines[1]["model"], "gcn");
    assert!(f.root.join("sweep/gcn-r2/metrics.jsonl").is_file());
    assert_eq!(code(&csnn(&["neighborsmatch-sweep", "--depths", "x", "--out", "s"], &f.root)), 1);
    assert_eq!(code(&csnn(&["neighborsmatch-sweep", "--models", "gat", "--out", "s"], &f.root)), 1);
}
