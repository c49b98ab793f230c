//! Long-running detection service.
//!
//! Stages, connected by channels:
//!
//! ```text
//! consumer -> decode pool -> batch former + inference lane -> post pool -> publisher
//! ```
//!
//! The executor lives on the inference lane thread only. A permit is taken
//! when a message is consumed and returned once it is published or fails, so
//! at most `decode_parallelism + batch_size` messages are in flight.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::client::{Backoff, BrokerClient};
use super::drift::{drift_update, DriftConfig, DriftState};
use super::pipeline::{decode_stage, postprocess_stage, DetectionMessage, ImageMessage, PostConfig};
use crate::bench::nearest_rank;
use crate::detector::{Executor, InputImage};
use crate::eval::BoxRecord;
use crate::geometry::Detection;

const POLL: Duration = Duration::from_millis(20);
const LATENCY_WINDOW: usize = 10_000;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("broker at {addr} unavailable after {attempts} attempts")]
    BrokerUnavailable { addr: String, attempts: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Topics {
    pub input: String,
    pub output: String,
    pub stats: String,
}

impl Default for Topics {
    fn default() -> Self {
        Self {
            input: "shelf.images".into(),
            output: "shelf.detections".into(),
            stats: "shelf.stats".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub broker: String,
    pub batch_size: usize,
    pub batch_timeout_ms: u64,
    pub decode_parallelism: usize,
    pub post_parallelism: usize,
    pub score_thr: f64,
    pub iou_thr: f64,
    pub max_dets: usize,
    pub topics: Topics,
    pub stats_interval_ms: u64,
    pub drift: Option<DriftConfig>,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
    /// Give up after this many failed connection attempts; retry forever when unset.
    pub max_connect_attempts: Option<u32>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let post = PostConfig::default();
        Self {
            broker: "127.0.0.1:9092".into(),
            batch_size: 1,
            batch_timeout_ms: 5,
            decode_parallelism: 2,
            post_parallelism: 2,
            score_thr: post.score_thr,
            iou_thr: post.iou_thr,
            max_dets: post.max_dets,
            topics: Topics::default(),
            stats_interval_ms: 1000,
            drift: None,
            backoff_initial_ms: 50,
            backoff_max_ms: 2000,
            max_connect_attempts: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ServeError> {
        let bad = |m: &str| Err(ServeError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.decode_parallelism == 0 || self.post_parallelism == 0 {
            return bad("stage parallelism must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.score_thr) || !(0.0..=1.0).contains(&self.iou_thr) {
            return bad("score_thr and iou_thr must lie in [0, 1]");
        }
        if self.max_dets == 0 {
            return bad("max_dets must be at least 1");
        }
        if self.stats_interval_ms == 0 {
            return bad("stats_interval_ms must be positive");
        }
        if let Some(d) = &self.drift {
            DriftState::new(d.clone()).map_err(|e| ServeError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn post(&self) -> PostConfig {
        PostConfig {
            score_thr: self.score_thr,
            iou_thr: self.iou_thr,
            max_dets: self.max_dets,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageMs {
    pub decode: f64,
    pub infer: f64,
    pub post: f64,
}

/// Payload of periodic messages on the stats topic.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StatsMessage {
    pub processed: u64,
    pub errors: u64,
    pub dropped: u64,
    pub lat_ms: Percentiles,
    /// Mean milliseconds per image spent in each stage.
    pub stage_ms: StageMs,
}

#[derive(Default)]
struct Counters {
    processed: AtomicU64,
    errors: AtomicU64,
    dropped: AtomicU64,
    in_flight: AtomicU64,
    max_in_flight: AtomicU64,
    latencies: Mutex<Vec<f64>>,
    stage_sums: Mutex<(f64, f64, f64, u64)>,
}

impl Counters {
    fn snapshot(&self) -> StatsMessage {
        let mut lat = self.latencies.lock().expect("stats lock").clone();
        lat.sort_by(f64::total_cmp);
        let lat_ms = if lat.is_empty() {
            Percentiles::default()
        } else {
            Percentiles {
                p50: nearest_rank(&lat, 50.0),
                p95: nearest_rank(&lat, 95.0),
                p99: nearest_rank(&lat, 99.0),
            }
        };
        let (d, i, p, n) = *self.stage_sums.lock().expect("stats lock");
        let n = n.max(1) as f64;
        StatsMessage {
            processed: self.processed.load(Ordering::SeqCst),
            errors: self.errors.load(Ordering::SeqCst),
            dropped: self.dropped.load(Ordering::SeqCst),
            lat_ms,
            stage_ms: StageMs {
                decode: d / n,
                infer: i / n,
                post: p / n,
            },
        }
    }
}

type SharedClient = Arc<RwLock<Option<Arc<BrokerClient>>>>;

struct Ctx {
    cfg: PipelineConfig,
    stop: AtomicBool,
    ready: AtomicBool,
    counters: Counters,
    client: SharedClient,
    fatal: Mutex<Option<ServeError>>,
}

impl Ctx {
    fn publish(&self, topic: &str, payload: Value) -> bool {
        let client = self.client.read().expect("client lock").clone();
        match client {
            Some(c) => match c.publish(topic, payload) {
                Ok(()) => true,
                Err(e) => {
                    debug!("publish to {topic} failed: {e}");
                    false
                }
            },
            None => false,
        }
    }

    fn publish_error(&self, image_id: &str, stage: &str, message: String) {
        self.counters.errors.fetch_add(1, Ordering::SeqCst);
        warn!("{stage} error on {image_id}: {message}");
        let ev = json!({"kind": "error", "stage": stage, "image_id": image_id, "message": message});
        self.publish(&self.cfg.topics.stats, ev);
    }

    fn release(&self, permits: &Receiver<()>) {
        let _ = permits.try_recv();
        self.counters.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

struct Job {
    msg: Value,
    started: Instant,
}

struct Decoded {
    input: InputImage,
    started: Instant,
    decode_ms: f64,
}

struct Inferred {
    input: InputImage,
    raw: Vec<Detection<f64>>,
    started: Instant,
    decode_ms: f64,
    infer_ms: f64,
}

struct Finished {
    image_id: String,
    boxes: Vec<BoxRecord>,
    started: Instant,
    decode_ms: f64,
    infer_ms: f64,
    post_ms: f64,
}

/// Running service. Stop it with [`ServiceHandle::stop`].
pub struct ServiceHandle {
    ctx: Arc<Ctx>,
    threads: Vec<JoinHandle<()>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSnapshot {
    pub stats: StatsMessage,
    pub in_flight: u64,
    pub max_in_flight: u64,
    pub ready: bool,
}

impl ServiceHandle {
    /// Subscribed to the input topic and accepting messages.
    pub fn is_ready(&self) -> bool {
        self.ctx.ready.load(Ordering::SeqCst)
    }

    pub fn wait_ready(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.is_ready() {
                return true;
            }
            if self.ctx.stop.load(Ordering::SeqCst) {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
        self.is_ready()
    }

    pub fn snapshot(&self) -> ServiceSnapshot {
        ServiceSnapshot {
            stats: self.ctx.counters.snapshot(),
            in_flight: self.ctx.counters.in_flight.load(Ordering::SeqCst),
            max_in_flight: self.ctx.counters.max_in_flight.load(Ordering::SeqCst),
            ready: self.is_ready(),
        }
    }

    pub fn stop(self) -> Result<(), ServeError> {
        self.ctx.stop.store(true, Ordering::SeqCst);
        self.join()
    }

    /// Waits for the service to end (only happens on stop or a fatal error).
    pub fn join(mut self) -> Result<(), ServeError> {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        match self.ctx.fatal.lock().expect("fatal lock").take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.ctx.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn spawn(name: &str, f: impl FnOnce() + Send + 'static) -> Result<JoinHandle<()>, ServeError> {
    Ok(thread::Builder::new().name(name.into()).spawn(f)?)
}

/// Starts the service in background threads.
pub fn serve(cfg: PipelineConfig, executor: Box<dyn Executor>) -> Result<ServiceHandle, ServeError> {
    cfg.validate()?;
    let ctx = Arc::new(Ctx {
        cfg,
        stop: AtomicBool::new(false),
        ready: AtomicBool::new(false),
        counters: Counters::default(),
        client: Arc::new(RwLock::new(None)),
        fatal: Mutex::new(None),
    });
    let cfg = &ctx.cfg;
    let capacity = cfg.decode_parallelism + cfg.batch_size;
    let (permit_tx, permit_rx) = bounded::<()>(capacity);
    let (job_tx, job_rx) = unbounded::<Job>();
    let (dec_tx, dec_rx) = unbounded::<Decoded>();
    let (inf_tx, inf_rx) = unbounded::<Inferred>();
    let (fin_tx, fin_rx) = unbounded::<Finished>();
    let input_size = executor.profile().input_size;
    let model = executor.profile().name.clone();

    let mut threads = Vec::new();
    {
        let ctx = ctx.clone();
        let permit_rx = permit_rx.clone();
        threads.push(spawn("serve-consumer", move || consumer(&ctx, permit_tx, permit_rx, job_tx))?);
    }
    for i in 0..cfg.decode_parallelism {
        let (ctx, job_rx, dec_tx, permit_rx) = (ctx.clone(), job_rx.clone(), dec_tx.clone(), permit_rx.clone());
        threads.push(spawn(&format!("serve-decode{i}"), move || {
            for job in job_rx {
                let t = Instant::now();
                let parsed: Result<ImageMessage, _> = serde_json::from_value(job.msg.clone());
                let result = match parsed {
                    Ok(msg) => decode_stage(&msg, input_size).map_err(|e| (msg.image_id.clone(), e.to_string())),
                    Err(e) => {
                        let id = job.msg.get("image_id").and_then(Value::as_str).unwrap_or("").to_string();
                        Err((id, format!("malformed image message: {e}")))
                    }
                };
                match result {
                    Ok(input) => {
                        let decode_ms = t.elapsed().as_secs_f64() * 1000.0;
                        let _ = dec_tx.send(Decoded { input, started: job.started, decode_ms });
                    }
                    Err((id, message)) => {
                        ctx.publish_error(&id, "decode", message);
                        ctx.release(&permit_rx);
                    }
                }
            }
        })?);
    }
    drop((job_rx, dec_tx));
    {
        let (ctx, permit_rx) = (ctx.clone(), permit_rx.clone());
        threads.push(spawn("serve-infer", move || inference_lane(&ctx, executor, dec_rx, inf_tx, &permit_rx))?);
    }
    for i in 0..cfg.post_parallelism {
        let (ctx, inf_rx, fin_tx) = (ctx.clone(), inf_rx.clone(), fin_tx.clone());
        threads.push(spawn(&format!("serve-post{i}"), move || {
            let post = ctx.cfg.post();
            for job in inf_rx {
                let t = Instant::now();
                let boxes = postprocess_stage(&job.input, &job.raw, &post);
                let _ = fin_tx.send(Finished {
                    image_id: job.input.image_id,
                    boxes,
                    started: job.started,
                    decode_ms: job.decode_ms,
                    infer_ms: job.infer_ms,
                    post_ms: t.elapsed().as_secs_f64() * 1000.0,
                });
            }
        })?);
    }
    drop((inf_rx, fin_tx));
    {
        let (ctx, permit_rx) = (ctx.clone(), permit_rx.clone());
        threads.push(spawn("serve-publish", move || publisher(&ctx, fin_rx, &permit_rx, model))?);
    }
    {
        let ctx = ctx.clone();
        threads.push(spawn("serve-stats", move || stats_loop(&ctx))?);
    }
    Ok(ServiceHandle { ctx, threads })
}

fn connect(ctx: &Ctx) -> Option<Arc<BrokerClient>> {
    let cfg = &ctx.cfg;
    let mut backoff = Backoff::new(
        Duration::from_millis(cfg.backoff_initial_ms.max(1)),
        Duration::from_millis(cfg.backoff_max_ms.max(1)),
    );
    let mut attempts = 0u32;
    while !ctx.stop.load(Ordering::SeqCst) {
        attempts += 1;
        let attempt = BrokerClient::connect(cfg.broker.as_str()).and_then(|c| {
            c.subscribe(&cfg.topics.input)?;
            c.barrier(Duration::from_secs(5))?;
            Ok(c)
        });
        match attempt {
            Ok(c) => {
                info!("connected to broker {} after {attempts} attempt(s)", cfg.broker);
                return Some(Arc::new(c));
            }
            Err(e) => {
                if cfg.max_connect_attempts.is_some_and(|m| attempts >= m) {
                    *ctx.fatal.lock().expect("fatal lock") = Some(ServeError::BrokerUnavailable {
                        addr: cfg.broker.clone(),
                        attempts,
                    });
                    ctx.stop.store(true, Ordering::SeqCst);
                    return None;
                }
                let delay = backoff.next_delay();
                warn!("broker {} unavailable ({e}); retrying in {delay:?}", cfg.broker);
                let until = Instant::now() + delay;
                while Instant::now() < until && !ctx.stop.load(Ordering::SeqCst) {
                    thread::sleep(POLL.min(until.saturating_duration_since(Instant::now())));
                }
            }
        }
    }
    None
}

fn consumer(ctx: &Ctx, permit_tx: Sender<()>, permit_rx: Receiver<()>, job_tx: Sender<Job>) {
    'outer: while !ctx.stop.load(Ordering::SeqCst) {
        let Some(client) = connect(ctx) else { break };
        *ctx.client.write().expect("client lock") = Some(client.clone());
        ctx.ready.store(true, Ordering::SeqCst);
        loop {
            if ctx.stop.load(Ordering::SeqCst) {
                break 'outer;
            }
            match client.recv_timeout(POLL) {
                Ok(Some(d)) if d.topic == ctx.cfg.topics.input => {
                    // wait for an in-flight slot
                    loop {
                        match permit_tx.send_timeout((), POLL) {
                            Ok(()) => break,
                            Err(SendTimeoutError::Timeout(())) if !ctx.stop.load(Ordering::SeqCst) => {}
                            Err(_) => break 'outer,
                        }
                    }
                    let n = ctx.counters.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    ctx.counters.max_in_flight.fetch_max(n, Ordering::SeqCst);
                    if job_tx.send(Job { msg: d.payload, started: Instant::now() }).is_err() {
                        ctx.release(&permit_rx);
                        break 'outer;
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    warn!("lost broker connection ({e}); reconnecting");
                    ctx.ready.store(false, Ordering::SeqCst);
                    *ctx.client.write().expect("client lock") = None;
                    continue 'outer;
                }
            }
        }
    }
    ctx.ready.store(false, Ordering::SeqCst);
}

fn inference_lane(
    ctx: &Ctx,
    mut executor: Box<dyn Executor>,
    rx: Receiver<Decoded>,
    tx: Sender<Inferred>,
    permits: &Receiver<()>,
) {
    let cfg = &ctx.cfg;
    let timeout = Duration::from_millis(cfg.batch_timeout_ms);
    while let Ok(first) = rx.recv() {
        let mut batch = vec![first];
        let deadline = Instant::now() + timeout;
        while batch.len() < cfg.batch_size {
            match rx.recv_deadline(deadline) {
                Ok(d) => batch.push(d),
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        let inputs: Vec<InputImage> = batch.iter().map(|d| d.input.clone()).collect();
        let t = Instant::now();
        let result = executor.infer(&inputs);
        let infer_ms = t.elapsed().as_secs_f64() * 1000.0 / batch.len() as f64;
        match result {
            Ok(out) if out.len() == batch.len() => {
                for (d, raw) in batch.into_iter().zip(out) {
                    let _ = tx.send(Inferred {
                        input: d.input,
                        raw,
                        started: d.started,
                        decode_ms: d.decode_ms,
                        infer_ms,
                    });
                }
            }
            other => {
                let message = match other {
                    Ok(out) => format!("executor returned {} outputs for {} inputs", out.len(), batch.len()),
                    Err(e) => e.to_string(),
                };
                for d in batch {
                    ctx.publish_error(&d.input.image_id, "infer", message.clone());
                    ctx.release(permits);
                }
            }
        }
    }
}

fn publisher(ctx: &Ctx, rx: Receiver<Finished>, permits: &Receiver<()>, model: String) {
    let mut drift = ctx.cfg.drift.clone().and_then(|d| DriftState::new(d).ok());
    for f in rx {
        let msg = DetectionMessage {
            image_id: f.image_id,
            boxes: f.boxes,
            latency_ms: f.started.elapsed().as_secs_f64() * 1000.0,
            model: model.clone(),
        };
        let payload = serde_json::to_value(&msg).expect("detection serialize");
        if ctx.publish(&ctx.cfg.topics.output, payload) {
            let c = &ctx.counters;
            c.processed.fetch_add(1, Ordering::SeqCst);
            {
                let mut lat = c.latencies.lock().expect("stats lock");
                if lat.len() == LATENCY_WINDOW {
                    lat.remove(0);
                }
                lat.push(msg.latency_ms);
            }
            let mut sums = c.stage_sums.lock().expect("stats lock");
            sums.0 += f.decode_ms;
            sums.1 += f.infer_ms;
            sums.2 += f.post_ms;
            sums.3 += 1;
        } else {
            ctx.counters.dropped.fetch_add(1, Ordering::SeqCst);
        }
        if let Some(state) = drift.as_mut() {
            if let Some(alert) = drift_update(state, &msg) {
                warn!("drift detected: {alert:?}");
                let mut ev = serde_json::to_value(&alert).expect("alert serialize");
                ev["kind"] = json!("drift");
                ctx.publish(&ctx.cfg.topics.stats, ev);
            }
        }
        ctx.release(permits);
    }
}

fn stats_loop(ctx: &Ctx) {
    let interval = Duration::from_millis(ctx.cfg.stats_interval_ms);
    let mut next = Instant::now() + interval;
    while !ctx.stop.load(Ordering::SeqCst) {
        if Instant::now() >= next {
            let snap = ctx.counters.snapshot();
            let payload = serde_json::to_value(&snap).expect("stats serialize");
            if !ctx.publish(&ctx.cfg.topics.stats, payload) {
                debug!("stats publish skipped: no broker connection");
            }
            next += interval;
        }
        thread::sleep(POLL.min(next.saturating_duration_since(Instant::now())));
    }
}
