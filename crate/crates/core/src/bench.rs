//! Latency / throughput measurement and speedup tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Executor, ExecutorError, ExecutorProfile, InputImage};
use crate::raster::{PpmError, Raster};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("executor failure: {0}")]
    ExecutorFailure(#[from] ExecutorError),
    #[error("executor returned {got} outputs for a batch of {expected}")]
    CardinalityMismatch { expected: usize, got: usize },
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("workload has {have} images, batch needs {need}")]
    InsufficientWorkload { have: usize, need: usize },
    #[error("workload image {index} does not decode: {source}")]
    Decode { index: usize, source: PpmError },
    #[error("baseline {0:?} not among the reports")]
    MissingBaseline(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub input_size: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            warmup_iters: 10,
            timed_iters: 100,
            input_size: 640,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples: usize,
}

/// Nearest-rank percentile of sorted samples: the `ceil(p/100 * n)`-th value.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Option<Self> {
        if samples_ms.is_empty() {
            return None;
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: nearest_rank(&s, 50.0),
            p95_ms: nearest_rank(&s, 95.0),
            p99_ms: nearest_rank(&s, 99.0),
            min_ms: s[0],
            max_ms: s[s.len() - 1],
            samples: s.len(),
        })
    }

    /// Constant stats for a single known value (e.g. a published number).
    pub fn constant(ms: f64) -> Self {
        Self {
            mean_ms: ms,
            p50_ms: ms,
            p95_ms: ms,
            p99_ms: ms,
            min_ms: ms,
            max_ms: ms,
            samples: 1,
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.min_ms <= self.p50_ms
            && self.p50_ms <= self.p95_ms
            && self.p95_ms <= self.p99_ms
            && self.p99_ms <= self.max_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub latency: LatencyStats,
    /// Images per second over the timed loop.
    pub throughput: f64,
    /// Decode + letterbox per image, measured outside the timed loop.
    pub preprocess: LatencyStats,
}

/// Times `executor` on a fixed batch built from the first `batch_size`
/// encoded PPM images of `workload`.
pub fn measure(
    executor: &mut dyn Executor,
    cfg: &BenchConfig,
    workload: &[Vec<u8>],
) -> Result<Measurement, BenchError> {
    if cfg.batch_size == 0 || cfg.timed_iters == 0 || cfg.input_size == 0 {
        return Err(BenchError::InvalidConfig(
            "batch_size, timed_iters and input_size must be positive".into(),
        ));
    }
    if workload.len() < cfg.batch_size {
        return Err(BenchError::InsufficientWorkload {
            have: workload.len(),
            need: cfg.batch_size,
        });
    }
    let mut pre_ms = Vec::with_capacity(cfg.batch_size);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for (index, bytes) in workload[..cfg.batch_size].iter().enumerate() {
        let t = Instant::now();
        let raster = Raster::decode_ppm(bytes).map_err(|source| BenchError::Decode { index, source })?;
        let input = InputImage::prepare(format!("w{index}"), &raster, cfg.input_size);
        pre_ms.push(t.elapsed().as_secs_f64() * 1000.0);
        batch.push(input);
    }
    let run = |executor: &mut dyn Executor| -> Result<(), BenchError> {
        let out = executor.infer(&batch)?;
        if out.len() != batch.len() {
            return Err(BenchError::CardinalityMismatch {
                expected: batch.len(),
                got: out.len(),
            });
        }
        Ok(())
    };
    for _ in 0..cfg.warmup_iters {
        run(executor)?;
    }
    let mut samples = Vec::with_capacity(cfg.timed_iters);
    let loop_start = Instant::now();
    for _ in 0..cfg.timed_iters {
        let t = Instant::now();
        run(executor)?;
        samples.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let total_s = loop_start.elapsed().as_secs_f64();
    Ok(Measurement {
        latency: LatencyStats::from_samples(&samples).expect("timed_iters > 0"),
        throughput: (cfg.batch_size * cfg.timed_iters) as f64 / total_s,
        preprocess: LatencyStats::from_samples(&pre_ms).expect("batch_size > 0"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub latency: Option<LatencyStats>,
    pub throughput: Option<f64>,
    pub preprocess: Option<LatencyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub executor: ExecutorProfile,
    pub rows: Vec<BenchRow>,
    pub baseline_name: Option<String>,
}

impl BenchReport {
    pub fn row(&self, batch_size: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.batch_size == batch_size)
    }
}

/// Measures every batch size in `batch_sizes` with otherwise identical settings.
pub fn bench_executor(
    executor: &mut dyn Executor,
    batch_sizes: &[usize],
    cfg: &BenchConfig,
    workload: &[Vec<u8>],
) -> Result<BenchReport, BenchError> {
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &bs in batch_sizes {
        let m = measure(
            executor,
            &BenchConfig {
                batch_size: bs,
                ..cfg.clone()
            },
            workload,
        )?;
        rows.push(BenchRow {
            batch_size: bs,
            latency: Some(m.latency),
            throughput: Some(m.throughput),
            preprocess: Some(m.preprocess),
        });
    }
    Ok(BenchReport {
        executor: executor.profile().clone(),
        rows,
        baseline_name: None,
    })
}

// ---------------------------------------------------------------------------
// speedup tables

/// `"(N.Nx)"` with one decimal.
pub fn format_ratio(ratio: f64) -> String {
    format!("({ratio:.1}x)")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupCell {
    pub latency_ms: Option<f64>,
    /// `latency / baseline latency`.
    pub latency_ratio: Option<f64>,
    pub throughput: Option<f64>,
    /// `throughput / baseline throughput`.
    pub throughput_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub name: String,
    /// One cell per entry of [`SpeedupTable::batch_sizes`].
    pub cells: Vec<SpeedupCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupTable {
    pub baseline: String,
    pub batch_sizes: Vec<usize>,
    pub rows: Vec<SpeedupRow>,
}

pub fn speedup_table(reports: &[BenchReport], baseline: &str) -> Result<SpeedupTable, BenchError> {
    let base = reports
        .iter()
        .find(|r| r.executor.name == baseline)
        .ok_or_else(|| BenchError::MissingBaseline(baseline.to_string()))?;
    let batch_sizes: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.rows.iter().map(|row| row.batch_size))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows = reports
        .iter()
        .map(|r| SpeedupRow {
            name: r.executor.name.clone(),
            cells: batch_sizes
                .iter()
                .map(|&bs| {
                    let row = r.row(bs);
                    let base_row = base.row(bs);
                    let latency_ms = row.and_then(|x| x.latency).map(|l| l.mean_ms);
                    let base_lat = base_row.and_then(|x| x.latency).map(|l| l.mean_ms);
                    let throughput = row.and_then(|x| x.throughput);
                    let base_tp = base_row.and_then(|x| x.throughput);
                    SpeedupCell {
                        latency_ms,
                        latency_ratio: latency_ms.zip(base_lat).map(|(a, b)| a / b),
                        throughput,
                        throughput_ratio: throughput.zip(base_tp).map(|(a, b)| a / b),
                    }
                })
                .collect(),
        })
        .collect();
    Ok(SpeedupTable {
        baseline: baseline.to_string(),
        batch_sizes,
        rows,
    })
}

fn annotated(value: Option<f64>, ratio: Option<f64>) -> String {
    match (value, ratio) {
        (Some(v), Some(r)) => format!("{v:.1} {}", format_ratio(r)),
        (Some(v), None) => format!("{v:.1}"),
        _ => "-".to_string(),
    }
}

impl SpeedupTable {
    /// Column-aligned text, one line per executor.
    pub fn to_text(&self) -> String {
        let mut header = vec!["executor".to_string()];
        for bs in &self.batch_sizes {
            header.push(format!("lat ms [BS={bs}]"));
            header.push(format!("TP img/s [BS={bs}]"));
        }
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.name.clone()];
            for c in &row.cells {
                line.push(annotated(c.latency_ms, c.latency_ratio));
                line.push(annotated(c.throughput, c.throughput_ratio));
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut s = format!("baseline: {}\n", self.baseline);
        for l in lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(s, "{}", cells.join("  ").trim_end()).unwrap();
        }
        s
    }

    /// Long format: one line per (executor, batch size).
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let ann = |v: Option<f64>| v.map(|v| format!("{v:.1}x")).unwrap_or_default();
        let mut s = String::from(
            "executor,batch_size,latency_ms,latency_ratio,latency_annotation,throughput,throughput_ratio,throughput_annotation\n",
        );
        for row in &self.rows {
            for (bs, c) in self.batch_sizes.iter().zip(&row.cells) {
                if c.latency_ms.is_none() && c.throughput.is_none() {
                    continue;
                }
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    row.name,
                    bs,
                    opt(c.latency_ms),
                    opt(c.latency_ratio),
                    ann(c.latency_ratio),
                    opt(c.throughput),
                    opt(c.throughput_ratio),
                    ann(c.throughput_ratio)
                )
                .unwrap();
            }
        }
        s
    }
}
