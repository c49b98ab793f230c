mod config;
mod executors;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use shelfpipe::bench::{bench_executor, speedup_table, BenchConfig, BenchReport};
use shelfpipe::dataset::{lint, load_dataset, stats, Dataset, LintConfig, Severity, Split, SplitCounts};
use shelfpipe::eval::{
    curve_aggregate, curve_csv, evaluate, read_predictions, write_predictions, EvalReport, ImagePredictions,
};
use shelfpipe::raster::Raster;
use shelfpipe::serve::{broker_sim, pipeline_process, serve, DriftConfig, ImageMessage, PipelineConfig, PostConfig, Topics};
use shelfpipe::synthgen::{generate_dataset, SceneParams};

use executors::{build_executor, ExecArgs};

/// Empty-shelf detection pipeline: data generation, QA, prediction,
/// evaluation, benchmarking and serving.
#[derive(Debug, Parser)]
#[command(name = "shelfpipe", version)]
struct Cli {
    /// JSON file with one object of flag values per subcommand; command-line flags win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// error, warn, info or debug (default from SHELFPIPE_LOG, else warn).
    #[arg(long, global = true, value_name = "LEVEL")]
    log_level: Option<log::LevelFilter>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shelf dataset (images, labels, manifest).
    Generate(GenerateArgs),
    /// Check annotations against the labeling rules.
    Lint(LintArgs),
    /// Box count, size and center distributions as CSV.
    Stats(StatsArgs),
    /// Run a reference executor over a dataset split and write predictions JSONL.
    Predict(PredictArgs),
    /// Score predictions against ground truth (mAP, mAR, mAF).
    Evaluate(EvaluateArgs),
    /// Collect evaluation reports into a learning-curve CSV.
    Curve(CurveArgs),
    /// Measure executor latency and throughput.
    Bench(BenchArgs),
    /// Run the detection service against a broker.
    Serve(ServeArgs),
    /// Run the in-process topic broker.
    Broker(BrokerArgs),
    /// Serve an executor over the stdin/stdout line protocol.
    Executor(ExecutorArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Number of images.
    #[arg(long)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// train,val,test counts; default 80/10/10 of --n.
    #[arg(long)]
    splits: Option<SplitCounts>,
    #[arg(long, default_value_t = 320)]
    img_w: u32,
    #[arg(long, default_value_t = 240)]
    img_h: u32,
    #[arg(long, default_value_t = 3)]
    rows: u32,
    #[arg(long, default_value_t = 8)]
    slots_per_row: u32,
    #[arg(long, default_value_t = 0.25)]
    empty_prob: f64,
    #[arg(long, default_value_t = 16)]
    min_product_w: u32,
    #[arg(long, default_value_t = 40)]
    max_product_w: u32,
    #[arg(long, default_value_t = 6)]
    board_px: u32,
    #[arg(long, default_value_t = 0.25)]
    merge_gap_frac: f64,
    /// Upper bound on normalized box width.
    #[arg(long)]
    max_box_frac: Option<f64>,
}

#[derive(Debug, Args)]
struct LintArgs {
    /// Path to dataset.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit JSON instead of tab-separated text.
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 2.0)]
    min_px: f64,
    #[arg(long, default_value_t = 0.25)]
    merge_gap_frac: f64,
    #[arg(long, default_value_t = 0.9)]
    dup_iou: f64,
    #[arg(long, default_value_t = 15)]
    max_count: usize,
    /// Expected train,val,test counts.
    #[arg(long)]
    reference_splits: Option<SplitCounts>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for counts.csv, sizes.csv and centers.csv; JSON on stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    post: PostArgs,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct PostArgs {
    #[arg(long, default_value_t = 0.25)]
    score_thr: f64,
    #[arg(long, default_value_t = 0.45)]
    iou_thr: f64,
    #[arg(long, default_value_t = 100)]
    max_dets: usize,
}

impl PostArgs {
    fn config(&self) -> PostConfig {
        PostConfig {
            score_thr: self.score_thr,
            iou_thr: self.iou_thr,
            max_dets: self.max_dets,
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predictions JSONL.
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Restrict ground truth to one split; whole dataset when omitted.
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CurveArgs {
    /// MODEL,TRAIN_SIZE,REPORT_JSON (repeatable).
    #[arg(long = "point", required = true)]
    points: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Batch size to measure (repeatable).
    #[arg(long = "batch-size", default_values_t = [1usize])]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Workload images come from this dataset; synthetic scenes otherwise.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// BenchReport JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Earlier BenchReport JSON files to compare against (repeatable).
    #[arg(long = "compare")]
    compare: Vec<PathBuf>,
    /// Executor name that speedups are relative to; this run when omitted.
    #[arg(long)]
    baseline: Option<String>,
    /// Write the speedup table as text here.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Write the speedup table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:9092")]
    broker: String,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    batch_timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    decode_parallelism: usize,
    #[arg(long, default_value_t = 2)]
    post_parallelism: usize,
    #[arg(long, default_value = "shelf.images")]
    input_topic: String,
    #[arg(long, default_value = "shelf.detections")]
    output_topic: String,
    #[arg(long, default_value = "shelf.stats")]
    stats_topic: String,
    #[arg(long, default_value_t = 1000)]
    stats_interval_ms: u64,
    #[arg(long, default_value_t = 50)]
    backoff_initial_ms: u64,
    #[arg(long, default_value_t = 2000)]
    backoff_max_ms: u64,
    /// Exit with an error after this many failed connection attempts.
    #[arg(long)]
    max_connect_attempts: Option<u32>,
    /// Detection-count drift window; drift monitoring is off when omitted.
    #[arg(long, requires = "drift_count_mean")]
    drift_window: Option<usize>,
    #[arg(long, requires = "drift_window")]
    drift_count_mean: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    drift_count_threshold: f64,
    /// Stop after this many seconds; run until killed when omitted.
    #[arg(long)]
    duration_secs: Option<f64>,
    #[command(flatten)]
    post: PostArgs,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct BrokerArgs {
    #[arg(long, default_value = "127.0.0.1:9092")]
    listen: String,
    /// Stop after this many seconds; run until killed when omitted.
    #[arg(long)]
    duration_secs: Option<f64>,
}

#[derive(Debug, Args)]
struct ExecutorArgs {
    #[command(flatten)]
    exec: ExecArgs,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
            ))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn dataset_root(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let params = SceneParams {
        img_w: a.img_w,
        img_h: a.img_h,
        rows: a.rows,
        slots_per_row: a.slots_per_row,
        empty_prob: a.empty_prob,
        product_w_range: (a.min_product_w, a.max_product_w),
        seed: a.seed,
        board_px: a.board_px,
        merge_gap_frac: a.merge_gap_frac,
        max_box_frac: a.max_box_frac,
        ..SceneParams::default()
    };
    let splits = a.splits.unwrap_or_else(|| {
        let train = a.n * 8 / 10;
        let val = a.n / 10;
        SplitCounts { train, val, test: a.n - train - val }
    });
    let d = generate_dataset(&params, a.n, splits, &a.out)?;
    info!("wrote {} images to {}", d.images.len(), a.out.display());
    Ok(())
}

fn cmd_lint(a: LintArgs) -> Result<bool> {
    let d = load(&a.data)?;
    let cfg = LintConfig {
        min_px: a.min_px,
        merge_gap_frac: a.merge_gap_frac,
        dup_iou: a.dup_iou,
        max_count: a.max_count,
        reference_splits: a.reference_splits,
    };
    let report = lint(&d, &cfg);
    if a.json {
        write_json(a.out.as_deref(), &report)?;
    } else {
        let mut w = output(a.out.as_deref())?;
        w.write_all(report.to_text().as_bytes())?;
        w.flush()?;
    }
    let errors = report.count(Severity::Error);
    eprintln!(
        "{} errors, {} warnings in {} images",
        errors,
        report.count(Severity::Warning),
        d.images.len()
    );
    Ok(errors == 0)
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let report = stats(&load(&a.data)?);
    match a.out {
        Some(dir) => report.write_csv(&dir).with_context(|| format!("cannot write {}", dir.display())),
        None => write_json(None, &report),
    }
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let d = load(&a.data)?;
    let root = dataset_root(&a.data);
    let mut executor = build_executor(&a.exec, Some(&d))?;
    let post = a.post.config();
    let mut preds = Vec::new();
    for img in d.images_in(a.split) {
        let path = root.join(&img.file);
        let bytes = fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let raster = Raster::decode_ppm(&bytes).with_context(|| format!("cannot decode {}", path.display()))?;
        let msg = ImageMessage::from_raster(img.id.clone(), &raster, 0);
        let out = pipeline_process(&msg, executor.as_mut(), &post)?;
        let detections = out
            .boxes
            .iter()
            .map(|b| b.to_detection())
            .collect::<Result<_, _>>()
            .with_context(|| format!("executor produced an invalid box for {}", img.id))?;
        preds.push(ImagePredictions { image_id: img.id.clone(), detections });
    }
    let mut w = output(a.out.as_deref())?;
    write_predictions(&mut w, &preds)?;
    w.flush()?;
    info!("wrote predictions for {} images", preds.len());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let d = load(&a.data)?;
    let f = File::open(&a.preds).with_context(|| format!("cannot open {}", a.preds.display()))?;
    let preds = read_predictions(BufReader::new(f))?;
    let report = evaluate(&preds, &d.ground_truth(a.split))?;
    write_json(a.out.as_deref(), &report)
}

fn cmd_curve(a: CurveArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.points {
        let parts: Vec<&str> = p.splitn(3, ',').collect();
        let [model, size, path] = parts[..] else {
            bail!("--point {p:?}: expected MODEL,TRAIN_SIZE,REPORT_JSON");
        };
        let size: usize = size.parse().with_context(|| format!("--point {p:?}: bad train size"))?;
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {path}"))?;
        let report: EvalReport<f64> = serde_json::from_str(&text).with_context(|| format!("{path} is not an evaluation report"))?;
        reports.push((size, model.to_string(), report));
    }
    let points = curve_aggregate(&reports)?;
    let mut w = output(a.out.as_deref())?;
    w.write_all(curve_csv(&points).as_bytes())?;
    w.flush()?;
    Ok(())
}

fn bench_workload(path: Option<&Path>, n: usize) -> Result<Vec<Vec<u8>>> {
    match path {
        Some(manifest) => {
            let d = load(manifest)?;
            let root = dataset_root(manifest);
            d.images
                .iter()
                .take(n)
                .map(|r| fs::read(root.join(&r.file)).with_context(|| format!("cannot read {}", r.file)))
                .collect()
        }
        None => (0..n as u64)
            .map(|i| {
                let p = shelfpipe::synthgen::image_params(&SceneParams::default(), i);
                Ok(shelfpipe::synthgen::generate(&p)?.image.encode_ppm())
            })
            .collect(),
    }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let need = a.batch_sizes.iter().copied().max().unwrap_or(1);
    let workload = bench_workload(a.workload.as_deref(), need)?;
    let dataset = a.workload.as_deref().map(load).transpose()?;
    let mut executor = build_executor(&a.exec, dataset.as_ref())?;
    let cfg = BenchConfig {
        batch_size: 1,
        warmup_iters: a.warmup,
        timed_iters: a.iters,
        input_size: executor.profile().input_size,
    };
    let mut report = bench_executor(executor.as_mut(), &a.batch_sizes, &cfg, &workload)?;
    report.baseline_name = a.baseline.clone();
    write_json(a.out.as_deref(), &report)?;
    if a.table.is_some() || a.csv.is_some() {
        let mut all = Vec::new();
        for p in &a.compare {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let r: BenchReport = serde_json::from_str(&text).with_context(|| format!("{} is not a bench report", p.display()))?;
            all.push(r);
        }
        all.push(report.clone());
        let baseline = a.baseline.clone().unwrap_or_else(|| report.executor.name.clone());
        let table = speedup_table(&all, &baseline)?;
        if let Some(p) = &a.table {
            fs::write(p, table.to_text())?;
        }
        if let Some(p) = &a.csv {
            fs::write(p, table.to_csv())?;
        }
    }
    Ok(())
}

fn wait_for(duration_secs: Option<f64>) -> Option<Duration> {
    duration_secs.map(|s| Duration::from_secs_f64(s.max(0.0)))
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let dataset = a.exec.gt.as_deref().map(load).transpose()?;
    let executor = build_executor(&a.exec, dataset.as_ref())?;
    let post = a.post.config();
    let cfg = PipelineConfig {
        broker: a.broker,
        batch_size: a.batch_size,
        batch_timeout_ms: a.batch_timeout_ms,
        decode_parallelism: a.decode_parallelism,
        post_parallelism: a.post_parallelism,
        score_thr: post.score_thr,
        iou_thr: post.iou_thr,
        max_dets: post.max_dets,
        topics: Topics {
            input: a.input_topic,
            output: a.output_topic,
            stats: a.stats_topic,
        },
        stats_interval_ms: a.stats_interval_ms,
        drift: a.drift_window.zip(a.drift_count_mean).map(|(window_len, mean)| DriftConfig {
            window_len,
            reference_count_mean: mean,
            count_threshold: a.drift_count_threshold,
            reference_score_mean: None,
            score_threshold: None,
        }),
        backoff_initial_ms: a.backoff_initial_ms,
        backoff_max_ms: a.backoff_max_ms,
        max_connect_attempts: a.max_connect_attempts,
    };
    let handle = serve(cfg, executor)?;
    match wait_for(a.duration_secs) {
        Some(d) => {
            std::thread::sleep(d);
            handle.stop()?;
        }
        None => handle.join()?,
    }
    Ok(())
}

fn cmd_broker(a: BrokerArgs) -> Result<()> {
    let broker = broker_sim(a.listen.as_str()).with_context(|| format!("cannot listen on {}", a.listen))?;
    println!("listening on {}", broker.local_addr());
    io::stdout().flush()?;
    match wait_for(a.duration_secs) {
        Some(d) => {
            std::thread::sleep(d);
            broker.stop();
        }
        None => broker.wait(),
    }
    Ok(())
}

fn cmd_executor(a: ExecutorArgs) -> Result<()> {
    let dataset = a.exec.gt.as_deref().map(load).transpose()?;
    let mut executor = build_executor(&a.exec, dataset.as_ref())?;
    let stdin = io::stdin();
    shelfpipe::detector::serve_stdio(executor.as_mut(), stdin.lock(), io::stdout().lock())?;
    Ok(())
}

fn init_logging(level: Option<log::LevelFilter>) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SHELFPIPE_LOG", "warn"));
    if let Some(l) = level {
        b.filter_level(l);
    }
    let _ = b.try_init();
}

fn run(argv: Vec<String>) -> ExitCode {
    let argv = match config::merge(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.log_level);
    let _ = cli.config;
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Lint(a) => match cmd_lint(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Stats(a) => cmd_stats(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Curve(a) => cmd_curve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Broker(a) => cmd_broker(a),
        Command::Executor(a) => cmd_executor(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    run(std::env::args().collect())
}
