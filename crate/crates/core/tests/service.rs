use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use shelfpipe::detector::{simulated_executor, ColorExecutor, Executor, ExecutorError, ExecutorProfile, InputImage};
use shelfpipe::serve::{broker_sim, serve, BrokerClient, DriftConfig, ImageMessage, PipelineConfig, ServeError};
use shelfpipe::synthgen::{generate, image_params, SceneParams};

const T: Duration = Duration::from_secs(10);

fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

fn color(size: u32) -> Box<dyn Executor> {
    Box::new(ColorExecutor::new(ExecutorProfile::new("color", size), [16, 16, 20], 8))
}

fn config(addr: SocketAddr) -> PipelineConfig {
    PipelineConfig {
        broker: addr.to_string(),
        stats_interval_ms: 50,
        backoff_initial_ms: 10,
        backoff_max_ms: 100,
        ..PipelineConfig::default()
    }
}

fn image(i: u64) -> ImageMessage {
    let scene = generate(&image_params(&SceneParams { empty_prob: 0.4, ..Default::default() }, i)).unwrap();
    ImageMessage::from_raster(format!("img{i}"), &scene.image, i)
}

fn observer(addr: SocketAddr, topics: &[&str]) -> BrokerClient {
    let c = BrokerClient::connect(addr).unwrap();
    for t in topics {
        c.subscribe(t).unwrap();
    }
    c.barrier(T).unwrap();
    c
}

/// Collects payloads on `topic` until `pred` accepts one or the timeout passes.
fn await_msg(c: &BrokerClient, topic: &str, mut pred: impl FnMut(&Value) -> bool) -> Option<Value> {
    let end = Instant::now() + T;
    while Instant::now() < end {
        if let Some(d) = c.recv_timeout(Duration::from_millis(20)).unwrap() {
            if d.topic == topic && pred(&d.payload) {
                return Some(d.payload);
            }
        }
    }
    None
}

#[test]
fn connects_once_a_late_broker_appears() {
    let addr = free_addr();
    let svc = serve(config(addr), color(320)).unwrap();
    std::thread::sleep(Duration::from_millis(300));
    assert!(!svc.is_ready());
    let _broker = broker_sim(addr).unwrap();
    assert!(svc.wait_ready(T));
    let obs = observer(addr, &["shelf.detections"]);
    obs.publish("shelf.images", serde_json::to_value(image(1)).unwrap()).unwrap();
    let d = await_msg(&obs, "shelf.detections", |_| true).expect("detection");
    assert_eq!(d["image_id"], "img1");
    assert_eq!(d["model"], "color");
    svc.stop().unwrap();
}

#[test]
fn gives_up_after_max_attempts() {
    let cfg = PipelineConfig { max_connect_attempts: Some(3), ..config(free_addr()) };
    let svc = serve(cfg, color(320)).unwrap();
    match svc.join() {
        Err(ServeError::BrokerUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected BrokerUnavailable, got {other:?}"),
    }
}

#[test]
fn invalid_config_is_rejected() {
    for cfg in [
        PipelineConfig { batch_size: 0, ..PipelineConfig::default() },
        PipelineConfig { decode_parallelism: 0, ..PipelineConfig::default() },
        PipelineConfig { score_thr: 1.5, ..PipelineConfig::default() },
        PipelineConfig {
            drift: Some(DriftConfig {
                window_len: 1,
                reference_count_mean: 1.0,
                count_threshold: 1.0,
                reference_score_mean: None,
                score_threshold: None,
            }),
            ..PipelineConfig::default()
        },
    ] {
        assert!(matches!(serve(cfg, color(320)), Err(ServeError::Config(_))));
    }
}

#[test]
fn config_parses_from_json_with_defaults() {
    let cfg: PipelineConfig = serde_json::from_value(json!({"broker": "h:1", "batch_size": 4})).unwrap();
    assert_eq!(cfg.batch_size, 4);
    assert_eq!(cfg.topics.input, "shelf.images");
    assert!(serde_json::from_value::<PipelineConfig>(json!({"bogus": 1})).is_err());
}

#[test]
fn stats_flow_with_no_traffic() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let obs = observer(broker.local_addr(), &["shelf.stats"]);
    let svc = serve(config(broker.local_addr()), color(320)).unwrap();
    assert!(svc.wait_ready(T));
    for _ in 0..3 {
        let s = await_msg(&obs, "shelf.stats", |v| v.get("processed").is_some()).expect("stats message");
        assert_eq!(s["processed"], 0);
        assert_eq!(s["errors"], 0);
        for k in ["p50", "p95", "p99"] {
            assert_eq!(s["lat_ms"][k], 0.0);
        }
        for k in ["decode", "infer", "post"] {
            assert!(s["stage_ms"][k].is_number());
        }
    }
    svc.stop().unwrap();
}

#[test]
fn bad_messages_are_reported_and_skipped() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let obs = observer(broker.local_addr(), &["shelf.stats", "shelf.detections"]);
    let svc = serve(config(broker.local_addr()), color(320)).unwrap();
    assert!(svc.wait_ready(T));
    let mut corrupt = image(2);
    corrupt.payload = "@@@".into();
    obs.publish("shelf.images", serde_json::to_value(&corrupt).unwrap()).unwrap();
    obs.publish("shelf.images", json!({"image_id": "junk"})).unwrap();
    obs.publish("shelf.images", serde_json::to_value(image(3)).unwrap()).unwrap();

    let mut error_ids = Vec::new();
    let mut detected = None;
    let end = Instant::now() + T;
    while Instant::now() < end && (error_ids.len() < 2 || detected.is_none()) {
        if let Some(d) = obs.recv_timeout(Duration::from_millis(20)).unwrap() {
            if d.payload["kind"] == "error" {
                assert_eq!(d.payload["stage"], "decode");
                error_ids.push(d.payload["image_id"].as_str().unwrap().to_string());
            } else if d.topic == "shelf.detections" {
                detected = Some(d.payload);
            }
        }
    }
    error_ids.sort();
    assert_eq!(error_ids, ["img2", "junk"]);
    assert_eq!(detected.expect("good image processed")["image_id"], "img3");
    let s = await_msg(&obs, "shelf.stats", |v| v["processed"] == 1).unwrap();
    assert_eq!(s["errors"], 2);
    let end = Instant::now() + T;
    while svc.snapshot().in_flight != 0 && Instant::now() < end {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert_eq!(svc.snapshot().in_flight, 0);
    svc.stop().unwrap();
}

/// Records the size of every batch it sees and sleeps per call.
struct Recording {
    profile: ExecutorProfile,
    sizes: Arc<Mutex<Vec<usize>>>,
    sleep: Duration,
}

impl Executor for Recording {
    fn profile(&self) -> &ExecutorProfile {
        &self.profile
    }
    fn infer(&mut self, batch: &[InputImage]) -> Result<Vec<Vec<shelfpipe::Detection>>, ExecutorError> {
        self.sizes.lock().unwrap().push(batch.len());
        std::thread::sleep(self.sleep);
        Ok(vec![Vec::new(); batch.len()])
    }
}

#[test]
fn in_flight_is_bounded_and_batches_form() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let obs = observer(broker.local_addr(), &["shelf.detections"]);
    let cfg = PipelineConfig { batch_size: 4, batch_timeout_ms: 50, decode_parallelism: 4, ..config(broker.local_addr()) };
    let sizes = Arc::new(Mutex::new(Vec::new()));
    let ex = Recording { profile: ExecutorProfile::new("rec", 320), sizes: sizes.clone(), sleep: Duration::from_millis(300) };
    let svc = serve(cfg, Box::new(ex)).unwrap();
    assert!(svc.wait_ready(T));
    for i in 0..24 {
        obs.publish("shelf.images", serde_json::to_value(image(i)).unwrap()).unwrap();
    }
    let mut ids = Vec::new();
    let end = Instant::now() + Duration::from_secs(30);
    while ids.len() < 24 && Instant::now() < end {
        if let Some(d) = obs.recv_timeout(Duration::from_millis(20)).unwrap() {
            ids.push(d.payload["image_id"].as_str().unwrap().to_string());
        }
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 24);
    let snap = svc.snapshot();
    assert!(snap.max_in_flight <= 8, "max in flight {}", snap.max_in_flight);
    let sizes = sizes.lock().unwrap().clone();
    assert_eq!(sizes.iter().sum::<usize>(), 24);
    assert!(sizes.iter().all(|&n| (1..=4).contains(&n)));
    assert!(sizes.iter().any(|&n| n > 1), "no batch formed: {sizes:?}");
    svc.stop().unwrap();
}

#[test]
fn drift_alert_on_stats_topic() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let obs = observer(broker.local_addr(), &["shelf.stats"]);
    let cfg = PipelineConfig {
        drift: Some(DriftConfig {
            window_len: 3,
            reference_count_mean: 20.0,
            count_threshold: 2.0,
            reference_score_mean: None,
            score_threshold: None,
        }),
        ..config(broker.local_addr())
    };
    let svc = serve(cfg, color(320)).unwrap();
    assert!(svc.wait_ready(T));
    for i in 0..3 {
        obs.publish("shelf.images", serde_json::to_value(image(i)).unwrap()).unwrap();
    }
    let alert = await_msg(&obs, "shelf.stats", |v| v["kind"] == "drift").expect("drift alert");
    assert_eq!(alert["metric"], "count");
    assert_eq!(alert["window_len"], 3);
    svc.stop().unwrap();
}

#[test]
fn reconnects_after_broker_restart() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let addr = broker.local_addr();
    let svc = serve(config(addr), color(320)).unwrap();
    assert!(svc.wait_ready(T));
    broker.stop();
    let end = Instant::now() + T;
    while svc.is_ready() && Instant::now() < end {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(!svc.is_ready());
    let _broker = broker_sim(addr).unwrap();
    assert!(svc.wait_ready(T));
    let obs = observer(addr, &["shelf.detections"]);
    obs.publish("shelf.images", serde_json::to_value(image(5)).unwrap()).unwrap();
    assert!(await_msg(&obs, "shelf.detections", |_| true).is_some());
    svc.stop().unwrap();
}

#[test]
fn executor_failures_are_errors_not_crashes() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let obs = observer(broker.local_addr(), &["shelf.stats"]);
    struct Failing(ExecutorProfile);
    impl Executor for Failing {
        fn profile(&self) -> &ExecutorProfile {
            &self.0
        }
        fn infer(&mut self, _: &[InputImage]) -> Result<Vec<Vec<shelfpipe::Detection>>, ExecutorError> {
            Err(ExecutorError::Failed("boom".into()))
        }
    }
    assert!(simulated_executor(ExecutorProfile::new("x", 320)).is_err());
    let svc = serve(config(broker.local_addr()), Box::new(Failing(ExecutorProfile::new("f", 320)))).unwrap();
    assert!(svc.wait_ready(T));
    obs.publish("shelf.images", serde_json::to_value(image(1)).unwrap()).unwrap();
    let e = await_msg(&obs, "shelf.stats", |v| v["kind"] == "error").unwrap();
    assert_eq!(e["stage"], "infer");
    assert!(e["message"].as_str().unwrap().contains("boom"));
    svc.stop().unwrap();
}
