//! Dataset manifest and annotation I/O, annotation lints and distribution
//! statistics.
//!
//! On-disk layout, relative to the directory holding `dataset.json`:
//!
//! ```text
//! dataset.json          manifest: name + image records
//! labels/<id>.txt       one `0 cx cy w h` line per box, 6 decimals
//! images/<id>.ppm       raster referenced by the record's `file`
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::GroundTruth;
use crate::geometry::{iou, NormBox};

pub const MANIFEST_FILE: &str = "dataset.json";
pub const LABELS_DIR: &str = "labels";
pub const IMAGES_DIR: &str = "images";

/// Class id written in annotation files; the only class is "empty".
pub const EMPTY_CLASS_ID: u32 = 0;
/// Label files carry six decimals, so a box edge may be off by up to
/// 0.5e-6 (center) + 0.25e-6 (half width) after a round trip.
pub const LABEL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line_no}: {reason}")]
    MalformedLine {
        file: PathBuf,
        line_no: usize,
        reason: String,
    },
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("invalid image record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// The 800/100/100 split of the reference dataset.
    pub const REFERENCE: SplitCounts = SplitCounts {
        train: 800,
        val: 100,
        test: 100,
    };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Split assigned to the `i`-th image: train first, then val, then test.
    pub fn split_of(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl std::str::FromStr for SplitCounts {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [train, val, test] => Ok(SplitCounts { train, val, test }),
            _ => Err(format!("expected train,val,test counts, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub split: Split,
    pub boxes: Vec<NormBox<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    file: String,
    width: u32,
    height: u32,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    images: Vec<ManifestRecord>,
}

fn validate_id(id: &str) -> Result<(), DatasetError> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(DatasetError::InvalidRecord {
            id: id.to_string(),
            reason: "id must be non-empty [A-Za-z0-9_.-] and not start with '.'".into(),
        })
    }
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join(LABELS_DIR).join(format!("{id}.txt"))
}

impl Dataset {
    pub fn split_counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for img in &self.images {
            match img.split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }

    pub fn images_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(move |r| r.split == split)
    }

    /// Pixel-space ground truth for one split, or the whole dataset.
    pub fn ground_truth(&self, split: Option<Split>) -> GroundTruth<f64> {
        let mut gt = GroundTruth::new();
        for img in self
            .images
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
        {
            let boxes = img
                .boxes
                .iter()
                .filter_map(|b| b.to_pixels(img.width as f64, img.height as f64).ok())
                .collect();
            gt.push(img.id.clone(), boxes);
        }
        gt
    }
}

/// Parses one annotation file. Bounds are not checked here; see [`lint`].
pub fn parse_annotations(text: &str, file: &Path) -> Result<Vec<NormBox<f64>>, DatasetError> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let malformed = |reason: String| DatasetError::MalformedLine {
            file: file.to_path_buf(),
            line_no: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 5 {
            return Err(malformed(format!("expected 5 fields, found {}", fields.len())));
        }
        if fields[0] != EMPTY_CLASS_ID.to_string() {
            return Err(malformed(format!("unknown class id {:?}", fields[0])));
        }
        let mut v = [0.0f64; 4];
        for (slot, raw) in v.iter_mut().zip(&fields[1..]) {
            *slot = raw
                .parse::<f64>()
                .map_err(|_| malformed(format!("not a number: {raw:?}")))?;
        }
        let b = NormBox::raw(v[0], v[1], v[2], v[3]).map_err(|e| malformed(e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn format_annotations(boxes: &[NormBox<f64>]) -> String {
    let mut s = String::new();
    for b in boxes {
        writeln!(s, "{EMPTY_CLASS_ID} {:.6} {:.6} {:.6} {:.6}", b.cx, b.cy, b.w, b.h).unwrap();
    }
    s
}

fn read_required(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_path_buf()),
        _ => DatasetError::Io(e),
    })
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DatasetError> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest: Manifest = serde_json::from_str(&read_required(manifest_path)?)?;
    let mut seen = HashSet::new();
    let mut images = Vec::with_capacity(manifest.images.len());
    for rec in manifest.images {
        validate_id(&rec.id)?;
        if !seen.insert(rec.id.clone()) {
            return Err(DatasetError::DuplicateImageId(rec.id));
        }
        if rec.width == 0 || rec.height == 0 {
            return Err(DatasetError::InvalidRecord {
                id: rec.id,
                reason: "width and height must be positive".into(),
            });
        }
        let path = label_path(root, &rec.id);
        let boxes = parse_annotations(&read_required(&path)?, &path)?;
        images.push(ImageRecord {
            id: rec.id,
            file: rec.file,
            width: rec.width,
            height: rec.height,
            split: rec.split,
            boxes,
        });
    }
    Ok(Dataset {
        name: manifest.name,
        images,
    })
}

pub fn manifest_json(d: &Dataset) -> String {
    let m = Manifest {
        name: d.name.clone(),
        images: d
            .images
            .iter()
            .map(|r| ManifestRecord {
                id: r.id.clone(),
                file: r.file.clone(),
                width: r.width,
                height: r.height,
                split: r.split,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
    s.push('\n');
    s
}

/// Writes the manifest and one annotation file per image under `dir`.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<PathBuf, DatasetError> {
    let mut seen = HashSet::new();
    for r in &d.images {
        validate_id(&r.id)?;
        if !seen.insert(r.id.as_str()) {
            return Err(DatasetError::DuplicateImageId(r.id.clone()));
        }
    }
    fs::create_dir_all(dir.join(LABELS_DIR))?;
    for r in &d.images {
        fs::write(label_path(dir, &r.id), format_annotations(&r.boxes))?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, manifest_json(d))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// lints

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum RuleId {
    /// Box leaves the image.
    L1,
    /// Box thinner than `min_px` pixels.
    L2,
    /// Two boxes on one shelf that should be a single annotation.
    L3,
    /// Near-duplicate boxes.
    L4,
    /// More boxes than expected in one image.
    L5,
    /// Split sizes differ from the declared reference.
    L6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub image_id: String,
    pub rule: RuleId,
    pub severity: Severity,
    pub box_index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LintConfig {
    pub min_px: f64,
    pub merge_gap_frac: f64,
    pub dup_iou: f64,
    pub max_count: usize,
    pub reference_splits: Option<SplitCounts>,
}

impl Default for LintConfig {
    fn default() -> Self {
        Self {
            min_px: 2.0,
            merge_gap_frac: 0.25,
            dup_iou: 0.9,
            max_count: 15,
            reference_splits: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LintReport {
    pub findings: Vec<Finding>,
}

impl LintReport {
    pub fn count(&self, severity: Severity) -> usize {
        self.findings.iter().filter(|f| f.severity == severity).count()
    }

    pub fn of_rule(&self, rule: RuleId) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(move |f| f.rule == rule)
    }

    /// One tab-separated line per finding.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in &self.findings {
            let idx = f.box_index.map(|i| i.to_string()).unwrap_or_else(|| "-".into());
            let sev = match f.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            writeln!(s, "{}\t{:?}\t{}\t{}\t{}", f.image_id, f.rule, sev, idx, f.message).unwrap();
        }
        s
    }
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn horizontal_gap(a: &NormBox<f64>, b: &NormBox<f64>) -> f64 {
    (b.left() - a.right()).max(a.left() - b.right()).max(0.0)
}

/// Whether two boxes on the same shelf row are close enough to be one empty location.
pub fn is_merge_candidate(a: &NormBox<f64>, b: &NormBox<f64>, merge_gap_frac: f64) -> bool {
    let v = interval_overlap(a.top(), a.bottom(), b.top(), b.bottom());
    v > 0.5 * a.h.min(b.h) && horizontal_gap(a, b) < merge_gap_frac * a.w.min(b.w)
}

pub fn lint(d: &Dataset, cfg: &LintConfig) -> LintReport {
    let mut findings = Vec::new();
    for img in &d.images {
        let (iw, ih) = (img.width as f64, img.height as f64);
        let mut push = |rule, severity, box_index, message: String| {
            findings.push(Finding {
                image_id: img.id.clone(),
                rule,
                severity,
                box_index,
                message,
            })
        };
        for (i, b) in img.boxes.iter().enumerate() {
            if !b.in_bounds_within(LABEL_TOLERANCE) {
                push(
                    RuleId::L1,
                    Severity::Error,
                    Some(i),
                    format!(
                        "box extends outside the image: x [{:.6}, {:.6}], y [{:.6}, {:.6}]",
                        b.left(),
                        b.right(),
                        b.top(),
                        b.bottom()
                    ),
                );
            }
            if b.w * iw < cfg.min_px || b.h * ih < cfg.min_px {
                push(
                    RuleId::L2,
                    Severity::Error,
                    Some(i),
                    format!(
                        "degenerate box {:.2}x{:.2} px (minimum {} px)",
                        b.w * iw,
                        b.h * ih,
                        cfg.min_px
                    ),
                );
            }
        }
        for i in 0..img.boxes.len() {
            for j in i + 1..img.boxes.len() {
                let (a, b) = (&img.boxes[i], &img.boxes[j]);
                let overlap = match (a.to_pixels(iw, ih), b.to_pixels(iw, ih)) {
                    (Ok(pa), Ok(pb)) => iou(&pa, &pb),
                    _ => 0.0,
                };
                if overlap > cfg.dup_iou {
                    push(
                        RuleId::L4,
                        Severity::Error,
                        Some(i),
                        format!("near-duplicate of box {j} (IoU {overlap:.3})"),
                    );
                } else if is_merge_candidate(a, b, cfg.merge_gap_frac) {
                    push(
                        RuleId::L3,
                        Severity::Warning,
                        Some(i),
                        format!(
                            "box {j} is on the same shelf with gap {:.6}; a continuous empty location takes one box",
                            horizontal_gap(a, b)
                        ),
                    );
                }
            }
        }
        if img.boxes.len() > cfg.max_count {
            push(
                RuleId::L5,
                Severity::Warning,
                None,
                format!("{} boxes exceeds expected maximum {}", img.boxes.len(), cfg.max_count),
            );
        }
    }
    if let Some(reference) = cfg.reference_splits {
        let actual = d.split_counts();
        if actual != reference {
            findings.push(Finding {
                image_id: String::new(),
                rule: RuleId::L6,
                severity: Severity::Warning,
                box_index: None,
                message: format!(
                    "split counts {}/{}/{} differ from reference {}/{}/{}",
                    actual.train, actual.val, actual.test, reference.train, reference.val, reference.test
                ),
            });
        }
    }
    findings.sort_by(|a, b| {
        (&a.image_id, a.rule, a.box_index).cmp(&(&b.image_id, b.rule, b.box_index))
    });
    LintReport { findings }
}

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointRow {
    pub image_id: String,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StatsReport {
    /// Boxes per image -> number of images. Images without boxes land in bin 0.
    pub count_histogram: BTreeMap<usize, usize>,
    /// Normalized (w, h) per box.
    pub size_points: Vec<PointRow>,
    /// Normalized (cx, cy) per box.
    pub centers: Vec<PointRow>,
}

pub fn stats(d: &Dataset) -> StatsReport {
    let mut r = StatsReport::default();
    for img in &d.images {
        *r.count_histogram.entry(img.boxes.len()).or_insert(0) += 1;
        for b in &img.boxes {
            r.size_points.push(PointRow {
                image_id: img.id.clone(),
                a: b.w,
                b: b.h,
            });
            r.centers.push(PointRow {
                image_id: img.id.clone(),
                a: b.cx,
                b: b.cy,
            });
        }
    }
    r
}

impl StatsReport {
    pub fn counts_csv(&self) -> String {
        let mut s = String::from("count,images\n");
        for (count, images) in &self.count_histogram {
            writeln!(s, "{count},{images}").unwrap();
        }
        s
    }

    // `{}` on f64 prints the shortest string that parses back to the same value
    fn points_csv(header: &str, rows: &[PointRow]) -> String {
        let mut s = format!("{header}\n");
        for p in rows {
            writeln!(s, "{},{},{}", p.image_id, p.a, p.b).unwrap();
        }
        s
    }

    pub fn sizes_csv(&self) -> String {
        Self::points_csv("image_id,w,h", &self.size_points)
    }

    pub fn centers_csv(&self) -> String {
        Self::points_csv("image_id,cx,cy", &self.centers)
    }

    /// Writes `counts.csv`, `sizes.csv` and `centers.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("counts.csv"), self.counts_csv())?;
        fs::write(dir.join("sizes.csv"), self.sizes_csv())?;
        fs::write(dir.join("centers.csv"), self.centers_csv())?;
        Ok(())
    }
}
