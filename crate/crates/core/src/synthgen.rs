//! Deterministic synthetic shelf scenes with exact ground truth.
//!
//! A scene is `rows` horizontal shelf bands separated by boards. Each band
//! holds `slots_per_row` slots whose widths are drawn from `product_w_range`
//! and rescaled to fill the image width. A slot is either a product (a
//! colored block that leaves a thin margin of shelf back visible) or empty
//! (the whole slot painted `empty_color`). Runs of adjacent empty slots form a
//! single ground-truth box spanning the full band height.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{self, Dataset, DatasetError, ImageRecord, SplitCounts, IMAGES_DIR};
use crate::geometry::{BBox, NormBox};
use crate::raster::{Raster, Rgb, PAD_COLOR};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Channel distance below which two colors count as confusable.
pub const MIN_COLOR_SEPARATION: u8 = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub img_w: u32,
    pub img_h: u32,
    pub rows: u32,
    pub slots_per_row: u32,
    pub empty_prob: f64,
    pub product_w_range: (u32, u32),
    pub palette: Vec<Rgb>,
    pub seed: u64,
    pub board_px: u32,
    pub empty_color: Rgb,
    pub back_color: Rgb,
    pub board_color: Rgb,
    /// Two empty runs on one row closer than this fraction of the narrower
    /// run are not generated (the narrower run is restocked).
    pub merge_gap_frac: f64,
    /// Upper bound on normalized box width and height.
    pub max_box_frac: Option<f64>,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            img_w: 320,
            img_h: 240,
            rows: 3,
            slots_per_row: 8,
            empty_prob: 0.25,
            product_w_range: (16, 40),
            palette: vec![
                [230, 230, 225],
                [200, 40, 40],
                [40, 90, 200],
                [240, 200, 60],
                [70, 170, 90],
                [190, 120, 200],
            ],
            seed: 0,
            board_px: 6,
            empty_color: [16, 16, 20],
            back_color: [96, 96, 104],
            board_color: [150, 110, 70],
            merge_gap_frac: 0.25,
            max_box_frac: None,
        }
    }
}

fn confusable(a: Rgb, b: Rgb) -> bool {
    a.iter().zip(&b).all(|(x, y)| x.abs_diff(*y) < MIN_COLOR_SEPARATION)
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if self.rows == 0 || self.slots_per_row == 0 {
            return bad("rows and slots_per_row must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.empty_prob) {
            return bad(format!("empty_prob {} outside [0, 1]", self.empty_prob));
        }
        let (lo, hi) = self.product_w_range;
        if lo == 0 || lo > hi {
            return bad(format!("product_w_range ({lo}, {hi}) must satisfy 0 < min <= max"));
        }
        if self.img_w < 4 * self.slots_per_row {
            return bad("image too narrow for the requested slots".into());
        }
        let boards = (self.rows + 1) * self.board_px;
        if self.img_h <= boards || (self.img_h - boards) / self.rows < 4 {
            return bad("image too short for the requested rows".into());
        }
        if self.palette.is_empty() {
            return bad("palette must not be empty".into());
        }
        for &c in self.palette.iter().chain([&self.back_color, &self.board_color, &PAD_COLOR]) {
            if confusable(c, self.empty_color) {
                return bad(format!("color {c:?} is too close to the empty color"));
            }
        }
        if let Some(f) = self.max_box_frac {
            let band = (self.img_h - boards) as f64 / self.rows as f64;
            if !(f > 0.0 && f <= 1.0) || (band + 1.0) / self.img_h as f64 >= f {
                return bad(format!("max_box_frac {f} is not above the shelf band height"));
            }
        }
        if !(self.merge_gap_frac >= 0.0) {
            return bad("merge_gap_frac must be non-negative".into());
        }
        Ok(())
    }

    /// Vertical pixel extent `[y0, y1)` of every shelf band.
    pub fn bands(&self) -> Vec<(u32, u32)> {
        let usable = self.img_h - (self.rows + 1) * self.board_px;
        (0..self.rows)
            .map(|r| {
                let y0 = self.board_px * (r + 1) + usable * r / self.rows;
                let y1 = self.board_px * (r + 1) + usable * (r + 1) / self.rows;
                (y0, y1)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Product { color: Rgb, width: u32 },
    Empty { width: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster,
    /// Slot states per row, left to right.
    pub slots: Vec<Vec<Slot>>,
    /// Ground truth in pixels, row by row, left to right.
    pub gt_pixels: Vec<BBox<f64>>,
    pub gt: Vec<NormBox<f64>>,
}

fn slot_bounds(rng: &mut ChaCha8Rng, p: &SceneParams) -> Vec<u32> {
    let (lo, hi) = p.product_w_range;
    let widths: Vec<u64> = (0..p.slots_per_row)
        .map(|_| rng.random_range(lo..=hi) as u64)
        .collect();
    let total: u64 = widths.iter().sum();
    let mut acc = 0u64;
    let mut bounds = vec![0u32];
    for w in widths {
        acc += w;
        bounds.push(((acc * p.img_w as u64 + total / 2) / total) as u32);
    }
    bounds
}

/// Contiguous runs of empty slots as `(first, last_exclusive)` slot indices.
fn empty_runs(empty: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < empty.len() {
        if empty[i] {
            let start = i;
            while i < empty.len() && empty[i] {
                i += 1;
            }
            runs.push((start, i));
        } else {
            i += 1;
        }
    }
    runs
}

/// Restocks slots until the row's empty runs satisfy the width cap and the
/// minimum gap between runs.
fn conform_row(empty: &mut [bool], bounds: &[u32], p: &SceneParams) {
    let px = |run: (usize, usize)| (bounds[run.1] - bounds[run.0]) as f64;
    if let Some(frac) = p.max_box_frac {
        let limit = frac * p.img_w as f64;
        for run in empty_runs(empty) {
            let mut end = run.1;
            while end > run.0 && px((run.0, end)) >= limit {
                end -= 1;
                empty[end] = false;
            }
        }
    }
    loop {
        let runs = empty_runs(empty);
        let offender = runs.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            let gap = (bounds[b.0] - bounds[a.1]) as f64;
            (gap < p.merge_gap_frac * px(a).min(px(b))).then(|| if px(a) < px(b) { a } else { b })
        });
        match offender {
            Some(run) => empty[run.0..run.1].iter_mut().for_each(|e| *e = false),
            None => break,
        }
    }
}

pub fn generate(p: &SceneParams) -> Result<Scene, SynthError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut image = Raster::filled(p.img_w, p.img_h, p.board_color);
    let mut slots = Vec::new();
    let mut gt_pixels = Vec::new();
    for (y0, y1) in p.bands() {
        image.fill_rect(0, y0, p.img_w, y1, p.back_color);
        let bounds = slot_bounds(&mut rng, p);
        let mut empty: Vec<bool> = (0..p.slots_per_row)
            .map(|_| rng.random_bool(p.empty_prob))
            .collect();
        conform_row(&mut empty, &bounds, p);
        let band_h = y1 - y0;
        let mut row = Vec::new();
        for (s, &is_empty) in empty.iter().enumerate() {
            let (x0, x1) = (bounds[s], bounds[s + 1]);
            let color = p.palette[rng.random_range(0..p.palette.len())];
            let top_gap = rng.random_range(0..=band_h / 5);
            if is_empty {
                image.fill_rect(x0, y0, x1, y1, p.empty_color);
                row.push(Slot::Empty { width: x1 - x0 });
            } else {
                let inset = u32::from(x1 - x0 > 2);
                image.fill_rect(x0 + inset, y0 + top_gap, x1 - inset, y1, color);
                row.push(Slot::Product {
                    color,
                    width: x1 - x0,
                });
            }
        }
        for (a, b) in empty_runs(&empty) {
            let b = BBox::from_corners(bounds[a] as f64, y0 as f64, bounds[b] as f64, y1 as f64)
                .expect("empty run has positive size");
            gt_pixels.push(b);
        }
        slots.push(row);
    }
    let gt = gt_pixels
        .iter()
        .map(|b| NormBox::from_pixels(b, p.img_w as f64, p.img_h as f64).expect("valid box"))
        .collect();
    Ok(Scene {
        image,
        slots,
        gt_pixels,
        gt,
    })
}

/// Parameters for the `index`-th image of a dataset: same scene settings,
/// seed `seed ^ index`.
pub fn image_params(p: &SceneParams, index: u64) -> SceneParams {
    SceneParams {
        seed: p.seed ^ index,
        ..p.clone()
    }
}

pub fn image_id(index: usize) -> String {
    format!("img{index:05}")
}

/// Writes `n_images` scenes, their annotations and the manifest under `dir`.
/// Images are assigned to train, val and test in that order.
pub fn generate_dataset(
    p: &SceneParams,
    n_images: usize,
    splits: SplitCounts,
    dir: &Path,
) -> Result<Dataset, SynthError> {
    p.validate()?;
    if splits.total() != n_images {
        return Err(SynthError::InvalidParams(format!(
            "split counts sum to {}, expected {n_images}",
            splits.total()
        )));
    }
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = n_images.div_ceil(workers).max(1);
    let indices: Vec<usize> = (0..n_images).collect();
    let records: Vec<Result<Vec<ImageRecord>, SynthError>> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|ids| {
                s.spawn(move || {
                    ids.iter()
                        .map(|&i| {
                            let scene = generate(&image_params(p, i as u64))?;
                            let id = image_id(i);
                            let file = format!("{IMAGES_DIR}/{id}.ppm");
                            fs::write(dir.join(&file), scene.image.encode_ppm())?;
                            Ok(ImageRecord {
                                id,
                                file,
                                width: p.img_w,
                                height: p.img_h,
                                split: splits.split_of(i),
                                boxes: scene.gt,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread")).collect()
    });
    let mut images = Vec::with_capacity(n_images);
    for r in records {
        images.extend(r?);
    }
    let d = Dataset {
        name: format!("synthetic-shelves-seed{}", p.seed),
        images,
    };
    dataset::save_dataset(&d, dir)?;
    // the manifest stores 6-decimal boxes; hand back exactly what a reload yields
    Ok(dataset::load_dataset(&dir.join(dataset::MANIFEST_FILE))?)
}
