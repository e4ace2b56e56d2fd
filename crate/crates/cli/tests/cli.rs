use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpgnn_core::kg::{KnowledgeGraph, Split};
use cpgnn_core::synthetic::toy_kg;
use serde_json::Value;

fn write_split(kg: &KnowledgeGraph, split: Split, path: &Path) {
    let mut s = String::new();
    for t in kg.split(split) {
        let e = |id: u32| kg.entities().name(id).unwrap().to_owned();
        s.push_str(&format!("{}\t{}\t{}\n", e(t.head.0), kg.relations().name(t.relation.0).unwrap(), e(t.tail.0)));
    }
    fs::write(path, s).unwrap();
}

fn dataset(dir: &Path) {
    let kg = toy_kg();
    fs::create_dir_all(dir).unwrap();
    for (split, name) in [(Split::Train, "train.txt"), (Split::Valid, "valid.txt"), (Split::Test, "test.txt")] {
        write_split(&kg, split, &dir.join(name));
    }
}

fn config(root: &Path, extra: &str) -> std::path::PathBuf {
    let path = root.join("run.conf");
    let text = format!(
        "data_dir = {}\noutput_dir = {}\ndim = 8\nfilters = 2\nbatch_size = 8\nepochs = 3\nlearning_rate = 0.01\nm = 10\nthreshold = 0.5\neval_every = 1\nallow_off_grid = true\n{extra}",
        root.join("data").display(),
        root.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn cpgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpgnn")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup() -> (tempfile::TempDir, String) {
    let tmp = tempfile::tempdir().unwrap();
    dataset(&tmp.path().join("data"));
    let conf = config(tmp.path(), "").display().to_string();
    (tmp, conf)
}

#[test]
fn ingest_reports_counts_and_provenance() {
    let (tmp, conf) = setup();
    let report: Value = serde_json::from_str(&ok(&cpgnn(&["ingest", "-c", &conf, "--save-graph"]))).unwrap();
    assert_eq!(report["n_entities"], 8);
    assert_eq!(report["n_relations"], 3);
    assert_eq!(report["triples"]["train"], 20);
    let saved: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/ingest.json")).unwrap()).unwrap();
    assert_eq!(saved["provenance"]["config_digest"].as_str().unwrap().len(), 64);
    assert!(tmp.path().join("out/kg.json").exists());
}

#[test]
fn proximity_is_content_addressed_and_empty_graph_warns() {
    let (tmp, conf) = setup();
    ok(&cpgnn(&["build-proximity", "-c", &conf, "--tsv"]));
    let bins: Vec<String> = fs::read_dir(tmp.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("proximity-") && n.ends_with(".bin"))
        .collect();
    assert_eq!(bins.len(), 1);
    assert_eq!(bins[0].len(), "proximity-.bin".len() + 64);

    let out = cpgnn(&["build-proximity", "-c", &conf, "--set", "threshold=1000"]);
    let stats: Value = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(stats["edge_count"], 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("proximity graph is empty"));
    let n_bins = fs::read_dir(tmp.path().join("out")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".bin")).count();
    assert_eq!(n_bins, 2);
}

#[test]
fn train_evaluate_and_ablation_rows() {
    let (tmp, conf) = setup();
    let mut mrrs = Vec::new();
    for (i, ablation) in ["false", "true"].iter().enumerate() {
        let out_dir = tmp.path().join(format!("out{i}")).display().to_string();
        let set = format!("ablation_kg_only={ablation}");
        let summary: Value = serde_json::from_str(&ok(&cpgnn(&["train", "-c", &conf, "--set", &set, "--output-dir", &out_dir]))).unwrap();
        assert_eq!(summary["finished"], true);
        assert_eq!(summary["epochs_done"], 3);
        let log = fs::read_to_string(Path::new(&out_dir).join("metrics.jsonl")).unwrap();
        let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0]["provenance"]["config"].as_str().unwrap().contains(&format!("ablation_kg_only = {ablation}")));
        assert!(lines[1..].iter().all(|l| l["train_loss"].as_f64().unwrap() > 0.0));

        let ckpt = Path::new(&out_dir).join("checkpoint.bin").display().to_string();
        let metrics: Value = serde_json::from_str(&ok(&cpgnn(&["evaluate", "--checkpoint", &ckpt]))).unwrap();
        assert_eq!(metrics["split"], "test");
        assert_eq!(metrics["n_queries"], 4);
        let mrr = metrics["mrr"].as_f64().unwrap();
        assert!(mrr > 0.0 && mrr <= 1.0);
        assert!(Path::new(&out_dir).join("metrics-test.json").exists());
        mrrs.push(mrr);

        let table = ok(&cpgnn(&["ntype", "--checkpoint", &ckpt]));
        assert!(table.starts_with("range\tcount\trate\n"));
        assert!(table.contains("range\tcount\tmrr\n"));
    }
    let again: Value = serde_json::from_str(&ok(&cpgnn(&[
        "evaluate",
        "--checkpoint",
        &tmp.path().join("out0/checkpoint.bin").display().to_string(),
    ])))
    .unwrap();
    assert_eq!(again["mrr"].as_f64().unwrap(), mrrs[0]);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let (tmp, conf) = setup();
    let a = tmp.path().join("a").display().to_string();
    let b = tmp.path().join("b").display().to_string();
    ok(&cpgnn(&["train", "-c", &conf, "--output-dir", &a, "--threads", "1"]));
    let first: Value = serde_json::from_str(&ok(&cpgnn(&["train", "-c", &conf, "--output-dir", &b, "--stop-after", "1", "--threads", "1"]))).unwrap();
    assert_eq!(first["finished"], false);
    ok(&cpgnn(&["train", "-c", &conf, "--output-dir", &b, "--resume", "--threads", "1"]));
    let eval = |dir: &str| ok(&cpgnn(&["evaluate", "--checkpoint", &format!("{dir}/checkpoint.bin"), "--last"]));
    assert_eq!(eval(&a), eval(&b));

    let out = cpgnn(&["train", "-c", &conf, "--output-dir", &b, "--resume", "--set", "epochs=4"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes_distinguish_failures() {
    let (tmp, conf) = setup();
    assert_eq!(cpgnn(&["ingest", "-c", &conf, "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(cpgnn(&["train", "-c", &conf, "--set", "allow_off_grid=false"]).status.code(), Some(2));
    assert_eq!(cpgnn(&["ingest", "-c", &conf, "--set", "m=2"]).status.code(), Some(2));
    assert_eq!(cpgnn(&["ingest", "--no-such-flag"]).status.code(), Some(2));
    let missing = tmp.path().join("nowhere").display().to_string();
    assert_eq!(cpgnn(&["ingest", "-c", &conf, "--data-dir", &missing]).status.code(), Some(3));
    fs::write(tmp.path().join("data/test.txt"), "a\tb\n").unwrap();
    assert_eq!(cpgnn(&["ingest", "-c", &conf]).status.code(), Some(3));
    dataset(&tmp.path().join("data"));
    let out = cpgnn(&["train", "-c", &conf, "--set", "optimizer=sgd", "--set", "learning_rate=1e300"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn grid_writes_ranked_table() {
    let (tmp, conf) = setup();
    let grid = tmp.path().join("grid.txt");
    fs::write(&grid, "seed = 1, 2\nm = 3, 4\n").unwrap();
    let table = ok(&cpgnn(&["grid", "-c", &conf, "--grid", &grid.display().to_string(), "--max-trials", "3"]));
    assert!(table.starts_with("# complete=false trials_done=3 trials_total=4"));
    assert_eq!(table.lines().count(), 6);
    let saved = fs::read_to_string(tmp.path().join("out/grid.tsv")).unwrap();
    assert!(saved.starts_with("# cpgnn "));
}
