use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use shelfpipe::detector::{Executor, ExecutorProfile, InputImage, SubprocessExecutor};
use shelfpipe::serve::{BrokerClient, ImageMessage};
use shelfpipe::synthgen::{generate, SceneParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shelfpipe"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn generate_into(dir: &Path, n: &str) {
    let out = dir.display().to_string();
    let o = run(&["generate", "--seed", "7", "--n", n, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    generate_into(&d, "10");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["images"].as_array().unwrap().len(), 10);
    assert!(d.join("labels/img00000.txt").exists());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&run(&["generate", "--n", "3", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&run(&["generate", "--n", "three", "--out", "x"])), 2);
}

#[test]
fn help_lists_flags_for_every_subcommand() {
    let cases: &[(&str, &[&str])] = &[
        ("generate", &["--n", "--out", "--seed", "--empty-prob", "--splits"]),
        ("lint", &["--data", "--min-px", "--merge-gap-frac", "--dup-iou", "--max-count"]),
        ("stats", &["--data", "--out"]),
        ("predict", &["--data", "--split", "--executor", "--score-thr", "--jitter-sigma"]),
        ("evaluate", &["--preds", "--data", "--split", "--out"]),
        ("curve", &["--point", "--out"]),
        ("bench", &["--batch-size", "--warmup", "--iters", "--base-ms", "--compare"]),
        ("serve", &["--broker", "--batch-size", "--decode-parallelism", "--stats-interval-ms"]),
        ("broker", &["--listen"]),
        ("executor", &["--executor", "--input-size"]),
    ];
    for (sub, flags) in cases {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        let text = String::from_utf8_lossy(&o.stdout);
        for f in *flags {
            assert!(text.contains(f), "{sub} --help lacks {f}");
        }
        assert!(text.contains("--config") && text.contains("--log-level"), "{sub}");
    }
}

#[test]
fn predict_then_evaluate_reports_maf() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    generate_into(&d, "10");
    let manifest = d.join("dataset.json").display().to_string();
    let preds = dir.path().join("p.jsonl").display().to_string();
    let o = run(&["predict", "--data", &manifest, "--split", "test", "--executor", "oracle", "--out", &preds]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["evaluate", "--preds", &preds, "--data", &manifest, "--split", "test"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["maf"], 100.0);

    let o = run(&["evaluate", "--preds", "/nonexistent.jsonl", "--data", &manifest]);
    assert_eq!(code(&o), 1);
}

#[test]
fn lint_exit_status_follows_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    generate_into(&d, "5");
    let manifest = d.join("dataset.json").display().to_string();
    assert_eq!(code(&run(&["lint", "--data", &manifest])), 0);
    fs::write(d.join("labels/img00000.txt"), "0 0.990000 0.500000 0.100000 0.200000\n").unwrap();
    let o = run(&["lint", "--data", &manifest]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("L1"));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let out = dir.path().join("d");
    fs::write(
        &cfg,
        format!(r#"{{"generate": {{"n": 6, "seed": 1, "out": "{}"}}}}"#, out.display()),
    )
    .unwrap();
    let cfg = cfg.display().to_string();
    let o = run(&["--config", &cfg, "generate", "--n", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(m["images"].as_array().unwrap().len(), 4);

    fs::write(dir.path().join("bad.json"), r#"{"generate": {"frob": 1}}"#).unwrap();
    let bad = dir.path().join("bad.json").display().to_string();
    assert_eq!(code(&run(&["--config", &bad, "generate", "--n", "1", "--out", "y"])), 2);
    assert_eq!(code(&run(&["--config", "/no/such/file.json", "generate"])), 2);
}

#[test]
fn bench_writes_report_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    let o = run(&[
        "bench", "--executor", "simulated", "--name", "slow", "--base-ms", "4", "--iters", "5", "--warmup", "1",
        "--out", &p("slow.json"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "bench", "--executor", "simulated", "--name", "fast", "--base-ms", "1", "--iters", "5", "--warmup", "1",
        "--compare", &p("slow.json"), "--baseline", "slow", "--out", &p("fast.json"), "--table", &p("t.txt"),
        "--csv", &p("t.csv"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(p("t.txt")).unwrap();
    assert!(table.starts_with("baseline: slow"));
    assert!(table.contains("(1.0x)"));
    assert!(fs::read_to_string(p("t.csv")).unwrap().lines().count() == 3);
    let o = run(&["bench", "--executor", "simulated", "--iters", "1"]);
    assert_eq!(code(&o), 1, "missing cost is an operation error");
}

#[test]
fn executor_subcommand_speaks_adapter_protocol() {
    let cmd = {
        let mut c = bin();
        c.args(["executor", "--executor", "color"]);
        c
    };
    let mut ex = SubprocessExecutor::spawn(ExecutorProfile::new("child", 256), cmd).unwrap();
    let scene = generate(&SceneParams { seed: 5, empty_prob: 0.4, ..Default::default() }).unwrap();
    let inputs: Vec<InputImage> = (0..3)
        .map(|i| InputImage::prepare(format!("im{i}"), &scene.image, 256))
        .collect();
    let out = ex.infer(&inputs).unwrap();
    assert_eq!(out.len(), 3);
    let mut direct = shelfpipe::detector::ColorExecutor::new(ExecutorProfile::new("c", 256), [16, 16, 20], 8);
    assert_eq!(out, direct.infer(&inputs).unwrap());
    assert!(!out[0].is_empty());
}

#[test]
fn broker_and_serve_subcommands_round_trip() {
    let mut broker = bin()
        .args(["broker", "--listen", "127.0.0.1:0", "--duration-secs", "20"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(broker.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();

    let mut service = bin()
        .args(["serve", "--broker", &addr, "--executor", "color", "--input-size", "320", "--stats-interval-ms", "100", "--duration-secs", "15"])
        .spawn()
        .unwrap();
    let client = BrokerClient::connect(addr.as_str()).unwrap();
    client.subscribe("shelf.detections").unwrap();
    client.barrier(Duration::from_secs(5)).unwrap();
    let scene = generate(&SceneParams { seed: 9, empty_prob: 0.4, ..Default::default() }).unwrap();
    let msg = ImageMessage::from_raster("cli0", &scene.image, 0);
    // the service subscribes asynchronously; republish until it answers
    let mut got = None;
    for _ in 0..100 {
        client.publish("shelf.images", serde_json::to_value(&msg).unwrap()).unwrap();
        if let Some(d) = client.recv_timeout(Duration::from_millis(100)).unwrap() {
            got = Some(d);
            break;
        }
    }
    let _ = service.kill();
    let _ = broker.kill();
    let _ = service.wait();
    let _ = broker.wait();
    let d = got.expect("detection message");
    assert_eq!(d.payload["image_id"], "cli0");
    assert_eq!(d.payload["boxes"].as_array().unwrap().len(), scene.gt.len());
}
