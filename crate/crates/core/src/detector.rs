//! Executor contract and reference executors.
//!
//! An [`Executor`] receives letterboxed images and returns raw (pre-NMS)
//! detections in model-input pixel coordinates, one list per input image.
//! Mapping back to original-image pixels is done by the caller.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::BoxRecord;
use crate::geometry::{letterbox, BBox, Detection, LetterboxTransform, NormBox};
use crate::raster::{Raster, Rgb};

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("executor profile {0:?} has no declared cost")]
    MissingCost(String),
    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),
    #[error("executor protocol error: {0}")]
    Protocol(String),
    #[error("executor failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fp32,
    Fp16,
}

/// Simulated cost: `base_ms + per_image_ms * batch_size` per call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeclaredCost {
    pub base_ms: f64,
    pub per_image_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorProfile {
    pub name: String,
    /// Millions of parameters; informational.
    pub params_m: f64,
    pub input_size: u32,
    pub precision: Precision,
    pub declared_cost: Option<DeclaredCost>,
}

impl ExecutorProfile {
    pub fn new(name: impl Into<String>, input_size: u32) -> Self {
        Self {
            name: name.into(),
            params_m: 0.0,
            input_size: input_size.max(1),
            precision: Precision::Fp32,
            declared_cost: None,
        }
    }
}

/// A letterboxed model input plus what is needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    pub image_id: String,
    pub raster: Raster,
    pub transform: LetterboxTransform<f64>,
    pub orig_w: u32,
    pub orig_h: u32,
}

impl InputImage {
    /// Letterboxes `image` to `input_size`.
    pub fn prepare(image_id: impl Into<String>, image: &Raster, input_size: u32) -> Self {
        let transform = letterbox::<f64>(image.width(), image.height(), input_size)
            .expect("raster dimensions are positive");
        Self {
            image_id: image_id.into(),
            raster: image.letterboxed(&transform),
            transform,
            orig_w: image.width(),
            orig_h: image.height(),
        }
    }
}

/// Any detection backend. `infer` must return exactly one list per input.
pub trait Executor: Send {
    fn profile(&self) -> &ExecutorProfile;

    fn infer(&mut self, batch: &[InputImage]) -> Result<Vec<Vec<Detection<f64>>>, ExecutorError>;
}

impl Executor for Box<dyn Executor> {
    fn profile(&self) -> &ExecutorProfile {
        (**self).profile()
    }

    fn infer(&mut self, batch: &[InputImage]) -> Result<Vec<Vec<Detection<f64>>>, ExecutorError> {
        (**self).infer(batch)
    }
}

// ---------------------------------------------------------------------------
// ground-truth oracle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Standard deviation of each corner's displacement, pixels.
    pub jitter_sigma: f64,
    pub drop_prob: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
    pub tp_mean: f64,
    pub tp_sd: f64,
    pub fp_mean: f64,
    pub fp_sd: f64,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self::zero()
    }
}

impl NoiseParams {
    /// Detections equal the ground truth, every score `tp_mean`.
    pub fn zero() -> Self {
        Self {
            jitter_sigma: 0.0,
            drop_prob: 0.0,
            fp_rate: 0.0,
            tp_mean: 0.9,
            tp_sd: 0.0,
            fp_mean: 0.4,
            fp_sd: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ExecutorError> {
        let bad = |m: &str| Err(ExecutorError::InvalidNoise(m.into()));
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad("drop_prob outside [0, 1]");
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return bad("fp_rate must be finite and >= 0");
        }
        if !(self.tp_sd >= 0.0 && self.fp_sd >= 0.0) || !self.tp_mean.is_finite() || !self.fp_mean.is_finite() {
            return bad("score model needs finite means and non-negative deviations");
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn draw_score(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    let v = Normal::new(mean, sd).expect("validated score model").sample(rng);
    v.clamp(0.0, 1.0)
}

/// Degrades ground truth into detections in original-image pixels.
pub fn oracle_predict(
    gt: &[NormBox<f64>],
    img_w: u32,
    img_h: u32,
    n: &NoiseParams,
) -> Result<Vec<Detection<f64>>, ExecutorError> {
    n.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(n.seed);
    let (w, h) = (img_w as f64, img_h as f64);
    let mut out = Vec::new();
    for g in gt {
        let dropped = rng.random_bool(n.drop_prob);
        let score = draw_score(&mut rng, n.tp_mean, n.tp_sd);
        if dropped {
            continue;
        }
        let Ok(b) = g.to_pixels(w, h) else { continue };
        let b = if n.jitter_sigma > 0.0 {
            let jitter = Normal::new(0.0, n.jitter_sigma).expect("validated sigma");
            let x0 = b.x() + jitter.sample(&mut rng);
            let y0 = b.y() + jitter.sample(&mut rng);
            let x1 = (b.x2() + jitter.sample(&mut rng)).max(x0 + 1.0);
            let y1 = (b.y2() + jitter.sample(&mut rng)).max(y0 + 1.0);
            BBox::from_corners(x0, y0, x1, y1).expect("corners ordered")
        } else {
            b
        };
        out.push(Detection::new(b, score).expect("clamped score"));
    }
    let n_fp = if n.fp_rate > 0.0 {
        Poisson::new(n.fp_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..n_fp {
        let bw = rng.random_range(0.05..0.3) * w;
        let bh = rng.random_range(0.05..0.3) * h;
        let x = rng.random_range(0.0..(w - bw));
        let y = rng.random_range(0.0..(h - bh));
        let score = draw_score(&mut rng, n.fp_mean, n.fp_sd);
        out.push(Detection::new(BBox::new(x, y, bw, bh).expect("positive size"), score).expect("clamped score"));
    }
    Ok(out)
}

/// FNV-1a, used to derive per-image noise seeds from image ids.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Executor that looks up ground truth by image id and applies [`oracle_predict`].
pub struct OracleExecutor {
    profile: ExecutorProfile,
    gt: HashMap<String, Vec<NormBox<f64>>>,
    noise: NoiseParams,
}

impl OracleExecutor {
    pub fn new(
        profile: ExecutorProfile,
        gt: HashMap<String, Vec<NormBox<f64>>>,
        noise: NoiseParams,
    ) -> Result<Self, ExecutorError> {
        noise.validate()?;
        Ok(Self { profile, gt, noise })
    }
}

impl Executor for OracleExecutor {
    fn profile(&self) -> &ExecutorProfile {
        &self.profile
    }

    fn infer(&mut self, batch: &[InputImage]) -> Result<Vec<Vec<Detection<f64>>>, ExecutorError> {
        batch
            .iter()
            .map(|img| {
                let Some(gt) = self.gt.get(&img.image_id) else {
                    return Ok(Vec::new());
                };
                let noise = self.noise.with_seed(self.noise.seed ^ id_hash(&img.image_id));
                oracle_predict(gt, img.orig_w, img.orig_h, &noise)?
                    .into_iter()
                    .map(|d| {
                        let b = img
                            .transform
                            .map_box(&d.bbox)
                            .map_err(|e| ExecutorError::Failed(e.to_string()))?;
                        Ok(Detection::new(b, d.score()).expect("score unchanged"))
                    })
                    .collect()
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// color threshold detector

fn matches_color(c: Rgb, target: Rgb, tol: u8) -> bool {
    c.iter().zip(&target).all(|(a, b)| a.abs_diff(*b) <= tol)
}

/// Rectangles of `empty_color` pixels (within `tol` per channel).
///
/// Each pixel row is split into maximal horizontal runs; runs with identical
/// extents on consecutive rows are stacked into one rectangle. Scores are 1.0.
pub fn color_threshold_detect(image: &Raster, empty_color: Rgb, tol: u8) -> Vec<Detection<f64>> {
    // open rectangles keyed by (x0, x1) -> top row
    let mut open: Vec<(u32, u32, u32)> = Vec::new();
    let mut done: Vec<(u32, u32, u32, u32)> = Vec::new();
    for y in 0..=image.height() {
        let mut runs = Vec::new();
        if y < image.height() {
            let mut x = 0;
            while x < image.width() {
                if matches_color(image.pixel(x, y), empty_color, tol) {
                    let start = x;
                    while x < image.width() && matches_color(image.pixel(x, y), empty_color, tol) {
                        x += 1;
                    }
                    runs.push((start, x));
                } else {
                    x += 1;
                }
            }
        }
        let mut next = Vec::with_capacity(runs.len());
        for (x0, x1) in runs {
            match open.iter().position(|&(a, b, _)| a == x0 && b == x1) {
                Some(i) => next.push(open.swap_remove(i)),
                None => next.push((x0, x1, y)),
            }
        }
        for (x0, x1, y0) in open.drain(..) {
            done.push((x0, y0, x1, y));
        }
        open = next;
    }
    done.sort_by_key(|&(x0, y0, _, _)| (y0, x0));
    done.into_iter()
        .map(|(x0, y0, x1, y1)| {
            let b = BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64).expect("non-empty run");
            Detection::new(b, 1.0).expect("unit score")
        })
        .collect()
}

pub struct ColorExecutor {
    profile: ExecutorProfile,
    empty_color: Rgb,
    tol: u8,
}

impl ColorExecutor {
    pub fn new(profile: ExecutorProfile, empty_color: Rgb, tol: u8) -> Self {
        Self {
            profile,
            empty_color,
            tol,
        }
    }
}

impl Executor for ColorExecutor {
    fn profile(&self) -> &ExecutorProfile {
        &self.profile
    }

    fn infer(&mut self, batch: &[InputImage]) -> Result<Vec<Vec<Detection<f64>>>, ExecutorError> {
        Ok(batch
            .iter()
            .map(|img| color_threshold_detect(&img.raster, self.empty_color, self.tol))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// simulated cost

/// Blocks for `d`, sleeping for the bulk and spinning the last stretch.
pub fn precise_wait(d: Duration) {
    let deadline = Instant::now() + d;
    let slack = Duration::from_micros(1500);
    if d > slack {
        std::thread::sleep(d - slack);
    }
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
}

pub struct SimulatedExecutor {
    profile: ExecutorProfile,
    cost: DeclaredCost,
    inner: Option<Box<dyn Executor>>,
}

impl SimulatedExecutor {
    /// Wraps `inner` so every call also pays the declared cost.
    pub fn wrapping(profile: ExecutorProfile, inner: Box<dyn Executor>) -> Result<Self, ExecutorError> {
        let mut s = simulated_executor(profile)?;
        s.inner = Some(inner);
        Ok(s)
    }
}

/// Executor that only burns `base_ms + per_image_ms * batch` of wall time.
pub fn simulated_executor(profile: ExecutorProfile) -> Result<SimulatedExecutor, ExecutorError> {
    let cost = profile
        .declared_cost
        .ok_or_else(|| ExecutorError::MissingCost(profile.name.clone()))?;
    if !(cost.base_ms >= 0.0 && cost.per_image_ms >= 0.0) {
        return Err(ExecutorError::Failed("declared cost must be non-negative".into()));
    }
    Ok(SimulatedExecutor {
        profile,
        cost,
        inner: None,
    })
}

impl Executor for SimulatedExecutor {
    fn profile(&self) -> &ExecutorProfile {
        &self.profile
    }

    fn infer(&mut self, batch: &[InputImage]) -> Result<Vec<Vec<Detection<f64>>>, ExecutorError> {
        let start = Instant::now();
        let out = match self.inner.as_mut() {
            Some(inner) => inner.infer(batch)?,
            None => vec![Vec::new(); batch.len()],
        };
        let ms = self.cost.base_ms + self.cost.per_image_ms * batch.len() as f64;
        if let Some(rest) = Duration::from_secs_f64(ms / 1000.0).checked_sub(start.elapsed()) {
            precise_wait(rest);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// external process adapter

/// One image sent to an external executor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRequest {
    pub image_id: String,
    pub input_size: u32,
    /// Base64 (standard alphabet, padded) of a binary PPM.
    pub pixels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub image_id: String,
    pub detections: Vec<BoxRecord>,
}

/// Runs a child process speaking one JSON object per line: a batch of N
/// images is N request lines, answered by N response lines in order.
pub struct SubprocessExecutor {
    profile: ExecutorProfile,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessExecutor {
    pub fn spawn(profile: ExecutorProfile, mut command: Command) -> Result<Self, ExecutorError> {
        let mut child = command.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            profile,
            child,
            stdin,
            stdout,
        })
    }
}

impl Drop for SubprocessExecutor {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Executor for SubprocessExecutor {
    fn profile(&self) -> &ExecutorProfile {
        &self.profile
    }

    fn infer(&mut self, batch: &[InputImage]) -> Result<Vec<Vec<Detection<f64>>>, ExecutorError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        for img in batch {
            let req = AdapterRequest {
                image_id: img.image_id.clone(),
                input_size: img.transform.input_size,
                pixels: b64.encode(img.raster.encode_ppm()),
            };
            let mut line = serde_json::to_vec(&req).expect("request serializes");
            line.push(b'\n');
            self.stdin.write_all(&line)?;
        }
        self.stdin.flush()?;
        let mut out = Vec::with_capacity(batch.len());
        for img in batch {
            let mut line = String::new();
            if self.stdout.read_line(&mut line)? == 0 {
                return Err(ExecutorError::Protocol("executor process closed its output".into()));
            }
            let resp: AdapterResponse =
                serde_json::from_str(&line).map_err(|e| ExecutorError::Protocol(e.to_string()))?;
            if resp.image_id != img.image_id {
                return Err(ExecutorError::Protocol(format!(
                    "response for {:?} while waiting for {:?}",
                    resp.image_id, img.image_id
                )));
            }
            let dets = resp
                .detections
                .into_iter()
                .map(|b| b.to_detection().map_err(|e| ExecutorError::Protocol(e.to_string())))
                .collect::<Result<_, _>>()?;
            out.push(dets);
        }
        Ok(out)
    }
}

/// Serves `executor` over the line protocol used by [`SubprocessExecutor`].
/// Returns when the input ends.
pub fn serve_stdio<E: Executor + ?Sized>(
    executor: &mut E,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<(), ExecutorError> {
    let b64 = base64::engine::general_purpose::STANDARD;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: AdapterRequest =
            serde_json::from_str(&line).map_err(|e| ExecutorError::Protocol(e.to_string()))?;
        let bytes = b64
            .decode(req.pixels.as_bytes())
            .map_err(|e| ExecutorError::Protocol(e.to_string()))?;
        let raster = Raster::decode_ppm(&bytes).map_err(|e| ExecutorError::Protocol(e.to_string()))?;
        let input = InputImage {
            image_id: req.image_id.clone(),
            transform: LetterboxTransform::identity(req.input_size),
            orig_w: raster.width(),
            orig_h: raster.height(),
            raster,
        };
        let dets = executor.infer(std::slice::from_ref(&input))?;
        let resp = AdapterResponse {
            image_id: req.image_id,
            detections: dets.first().map(|d| d.iter().map(BoxRecord::from).collect()).unwrap_or_default(),
        };
        serde_json::to_writer(&mut output, &resp).map_err(|e| ExecutorError::Protocol(e.to_string()))?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
