use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use mmrec_cli::artifacts::{read_rows, read_run, write_run, Header, Layout};
use mmrec_cli::study::RetrievalRun;
use mmrec_cli::{report, CliError, ExperimentConfig};
use serde_json::Value;

const TINY: [&str; 8] = [
    "data.impressions.n_records=4000",
    "data.impressions.n_users=50",
    "data.catalog.n_items=60",
    "data.triplets.n_train=600",
    "data.triplets.n_eval=600",
    "pretrain.epochs=1",
    "pretrain.bank_size=64",
    "pipeline.n_events=100",
];

fn mmrec(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmrec"));
    cmd.arg("--out").arg(out).args(["--seed", "5"]);
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.args(args).env("RUST_LOG", "error").output().unwrap()
}

fn error_line(o: &Output) -> Value {
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr `{text}` is not JSON: {e}"))
}

#[test]
fn report_without_runs_fails_with_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmrec(dir.path(), &["report"]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_line(&o);
    assert_eq!(e["error"], "no_runs");
    assert!(e["message"].as_str().unwrap().contains("no runs found"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmrec(dir.path(), &["--set", "ctr.no_such_key=1", "gen-data"]);
    assert_eq!(error_line(&o)["error"], "config");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"pretrain": {"epochz": 3}}"#).unwrap();
    let o = mmrec(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(error_line(&o)["error"], "config");
    assert!(!dir.path().join("data").exists());
}

fn retrieval_doc(checkpoint: &str) -> RetrievalRun {
    RetrievalRun {
        checkpoint: checkpoint.into(),
        n_queries: 10,
        acc1: 0.5,
        acc5: 0.9,
        acc: vec![(1, 0.5), (5, 0.9)],
    }
}

#[test]
fn mixed_config_hashes_need_explicit_consent() {
    let dir = tempfile::tempdir().unwrap();
    let a = ExperimentConfig::default();
    let b = ExperimentConfig::load(None, &["ctr.epochs=2".into()], None).unwrap();
    write_run(&dir.path().join("a.json"), "retrieval", &a, &retrieval_doc("scl_full")).unwrap();
    write_run(&dir.path().join("b.json"), "retrieval", &b, &retrieval_doc("scl_moco")).unwrap();
    match report::build(dir.path(), false) {
        Err(CliError::MixedHashes(h)) => assert_eq!(h.len(), 2),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mixed hashes were accepted"),
    }
    let r = report::build(dir.path(), true).unwrap();
    let t2 = &r.files["table2.csv"];
    assert!(t2.contains(&a.hash()) && t2.contains(&b.hash()));

    let out = tempfile::tempdir().unwrap();
    let runs = dir.path().to_str().unwrap();
    assert_eq!(error_line(&mmrec(out.path(), &["report", "--runs", runs]))["error"], "mixed_hashes");
    assert!(mmrec(out.path(), &["report", "--runs", runs, "--allow-mixed"]).status.success());
}

#[test]
fn artifacts_carry_config_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(mmrec(out, &["gen-data"]).status.success());
    let config: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    let hash = config["config_hash"].as_str().unwrap().to_string();
    assert_eq!(config["seed"], 5);

    let layout = Layout::new(out);
    let (h, items): (Header, Vec<Value>) = read_rows(&layout.data("items.jsonl"), "items").unwrap();
    assert_eq!((h.config_hash.as_str(), h.seed, h.rows), (hash.as_str(), 5, 60));
    assert_eq!(items.len(), 60);

    assert!(mmrec(out, &["pretrain", "--arms", "untrained,full"]).status.success());
    let (_, meta) = mmrec_cli::artifacts::load_params(&layout.checkpoint("scl_full")).unwrap();
    assert_eq!((meta["config_hash"].as_str(), meta["seed"].as_str()), (hash.as_str(), "5"));
    assert!(layout.checkpoint("scl_full_epoch_1").exists());

    assert!(mmrec(out, &["eval-retrieval"]).status.success());
    let run = read_run(&layout.run("retrieval_scl_full")).unwrap();
    assert_eq!((run["config_hash"].as_str(), run["seed"].as_u64()), (Some(hash.as_str()), Some(5)));

    let o = mmrec(out, &["report"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t2 = fs::read_to_string(layout.report_dir().join("table2.csv")).unwrap();
    let rows: Vec<&str> = t2.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.ends_with(&format!(",{hash},5"))));

    let o = mmrec(out, &["simulate-pipeline"]);
    assert!(o.status.success());
    let sim: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((sim["events"].as_u64(), sim["commits"].as_u64()), (Some(100), Some(100)));
    assert!(layout.run("pipeline_sim").exists());
}

#[test]
fn ctr_without_data_reports_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&mmrec(dir.path(), &["train-ctr", "--variants", "id_base"]));
    assert_eq!(e["error"], "input");
    let e = error_line(&mmrec(dir.path(), &["pretrain", "--arms", "sideways"]));
    assert_eq!(e["error"], "config");
}

#[test]
fn served_pipeline_answers_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(mmrec(out, &["gen-data"]).status.success());
    assert!(mmrec(out, &["pretrain", "--arms", "untrained"]).status.success());
    let ckpt = Layout::new(out).checkpoint("scl_untrained");

    let mut child = Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .arg("--out")
        .arg(out)
        .args(["serve-pipeline", "--addr", "127.0.0.1:0", "--reps"])
        .arg(&ckpt)
        .env("RUST_LOG", "error")
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Ok(v) = serde_json::from_str::<Value>(&line) {
            if let Some(a) = v["listening"].as_str() {
                break a.to_string();
            }
        }
    };

    let stream = TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut call = |frame: &str| -> Value {
        writer.write_all(frame.as_bytes()).unwrap();
        writer.write_all(b"\n").unwrap();
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    };
    let feature: Vec<f32> = (0..32).map(|i| i as f32 / 32.0).collect();
    let put = call(&serde_json::json!({"op": "put_item", "item_id": 7, "modal_feature": feature}).to_string());
    assert_eq!(put["version"], 1);
    let mut got = Value::Null;
    for _ in 0..200 {
        got = call(r#"{"op":"get_rep","item_id":7}"#);
        if got["ok"] == true {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(got["version"], 1);
    let rep: Vec<f64> = serde_json::from_value(got["rep"].clone()).unwrap();
    let norm = rep.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5, "{norm}");
}
