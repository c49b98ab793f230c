//! Box primitives, IoU, greedy NMS and letterbox transforms.
//!
//! Pixel boxes use a top-left origin with `y` growing downward. All functions
//! here are pure and generic over [`Scalar`].

use std::cmp::Ordering;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box has non-finite coordinate")]
    NonFinite,
    #[error("box width and height must be positive")]
    NonPositiveSize,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("image and input dimensions must be positive")]
    ZeroDimension,
}

/// Axis-aligned rectangle in pixels: left edge, top edge, width, height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    x: T,
    y: T,
    w: T,
    h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Result<Self, GeometryError> {
        if !(x.is_finite_value() && y.is_finite_value() && w.is_finite_value() && h.is_finite_value())
        {
            return Err(GeometryError::NonFinite);
        }
        if !(w > T::zero() && h > T::zero()) {
            return Err(GeometryError::NonPositiveSize);
        }
        Ok(Self { x, y, w, h })
    }

    /// Box spanning `[x0, x1) x [y0, y1)`.
    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Result<Self, GeometryError> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn x(&self) -> T {
        self.x
    }
    pub fn y(&self) -> T {
        self.y
    }
    pub fn w(&self) -> T {
        self.w
    }
    pub fn h(&self) -> T {
        self.h
    }
    pub fn x2(&self) -> T {
        self.x + self.w
    }
    pub fn y2(&self) -> T {
        self.y + self.h
    }
    pub fn area(&self) -> T {
        self.w * self.h
    }

    /// Uniformly scales position and size by `k`.
    pub fn scaled(&self, k: T) -> Result<Self, GeometryError> {
        Self::new(self.x * k, self.y * k, self.w * k, self.h * k)
    }

    /// Intersection with `[0, width] x [0, height]`, or `None` if nothing is left.
    pub fn clip(&self, width: T, height: T) -> Option<Self> {
        let x0 = self.x.max_of(T::zero());
        let y0 = self.y.max_of(T::zero());
        let x1 = self.x2().min_of(width);
        let y1 = self.y2().min_of(height);
        Self::from_corners(x0, y0, x1, y1).ok()
    }

    pub fn to_f64(&self) -> BBox<f64> {
        BBox {
            x: self.x.to_f64_lossy(),
            y: self.y.to_f64_lossy(),
            w: self.w.to_f64_lossy(),
            h: self.h.to_f64_lossy(),
        }
    }
}

/// Box in fractions of image width/height, stored as center and size.
///
/// Constructed either checked ([`NormBox::new`], which enforces that the box
/// lies inside the unit square) or raw ([`NormBox::raw`]) for annotations that
/// still have to go through dataset lints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

pub const NORM_TOLERANCE: f64 = 1e-9;

impl<T: Scalar> NormBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        let b = Self::raw(cx, cy, w, h)?;
        if !b.in_bounds() {
            return Err(GeometryError::NonPositiveSize);
        }
        Ok(b)
    }

    /// Requires finite values and a positive size; bounds are not checked.
    pub fn raw(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        if !(cx.is_finite_value() && cy.is_finite_value() && w.is_finite_value() && h.is_finite_value())
        {
            return Err(GeometryError::NonFinite);
        }
        if !(w > T::zero() && h > T::zero()) {
            return Err(GeometryError::NonPositiveSize);
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn left(&self) -> T {
        self.cx - self.w / T::from_int(2)
    }
    pub fn right(&self) -> T {
        self.cx + self.w / T::from_int(2)
    }
    pub fn top(&self) -> T {
        self.cy - self.h / T::from_int(2)
    }
    pub fn bottom(&self) -> T {
        self.cy + self.h / T::from_int(2)
    }

    /// All four edges inside `[0, 1]` up to [`NORM_TOLERANCE`].
    pub fn in_bounds(&self) -> bool {
        self.in_bounds_within(T::from_f64(NORM_TOLERANCE).unwrap_or_else(T::zero))
    }

    pub fn in_bounds_within(&self, tol: T) -> bool {
        let lo = -tol;
        let hi = T::one() + tol;
        [self.left(), self.right(), self.top(), self.bottom()]
            .iter()
            .all(|v| *v >= lo && *v <= hi)
    }

    pub fn to_pixels(&self, img_w: T, img_h: T) -> Result<BBox<T>, GeometryError> {
        BBox::new(
            self.left() * img_w,
            self.top() * img_h,
            self.w * img_w,
            self.h * img_h,
        )
    }

    pub fn from_pixels(b: &BBox<T>, img_w: T, img_h: T) -> Result<Self, GeometryError> {
        let two = T::from_int(2);
        Self::raw(
            (b.x() + b.w() / two) / img_w,
            (b.y() + b.h() / two) / img_h,
            b.w() / img_w,
            b.h() / img_h,
        )
    }
}

/// A scored box. The score is a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    score: T,
}

impl<T: Scalar> Detection<T> {
    pub fn new(bbox: BBox<T>, score: T) -> Result<Self, GeometryError> {
        if !(score.is_finite_value() && score >= T::zero() && score <= T::one()) {
            return Err(GeometryError::ScoreOutOfRange(score.to_f64_lossy()));
        }
        Ok(Self { bbox, score })
    }

    pub fn score(&self) -> T {
        self.score
    }
}

/// Intersection-over-union. Zero when the boxes do not overlap.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = a.x2().min_of(b.x2()) - a.x.max_of(b.x);
    let ih = a.y2().min_of(b.y2()) - a.y.max_of(b.y);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsParams<T> {
    pub iou_thr: T,
    pub score_thr: T,
    pub max_dets: usize,
}

impl<T: Scalar> Default for NmsParams<T> {
    fn default() -> Self {
        Self {
            iou_thr: T::ratio(45, 100),
            score_thr: T::ratio(25, 100),
            max_dets: 100,
        }
    }
}

/// Descending score order; equal scores keep their input order.
pub(crate) fn score_order<T: Scalar>(scores: impl IntoIterator<Item = T>) -> Vec<usize> {
    let scores: Vec<T> = scores.into_iter().collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Class-agnostic greedy NMS.
///
/// Candidates below `score_thr` are dropped; the survivors are visited by
/// descending score (ties by input index) and kept unless their IoU with an
/// already kept box exceeds `iou_thr`.
pub fn nms<T: Scalar>(cands: &[Detection<T>], params: &NmsParams<T>) -> Vec<Detection<T>> {
    let order = score_order(cands.iter().map(|d| d.score));
    let mut kept: Vec<Detection<T>> = Vec::new();
    for idx in order {
        if kept.len() >= params.max_dets {
            break;
        }
        let cand = &cands[idx];
        if cand.score < params.score_thr {
            continue;
        }
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= params.iou_thr) {
            kept.push(*cand);
        }
    }
    kept
}

/// Aspect-preserving resize into a square `input_size` canvas plus padding.
///
/// The resized image occupies `resized_w x resized_h` pixels at offset
/// `(pad_x, pad_y)`; the odd remainder of the padding sits on the right/bottom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform<T> {
    pub scale: T,
    pub pad_x: T,
    pub pad_y: T,
    pub input_size: u32,
    pub resized_w: u32,
    pub resized_h: u32,
}

pub fn letterbox<T: Scalar>(
    img_w: u32,
    img_h: u32,
    input_size: u32,
) -> Result<LetterboxTransform<T>, GeometryError> {
    if img_w == 0 || img_h == 0 || input_size == 0 {
        return Err(GeometryError::ZeroDimension);
    }
    let long = img_w.max(img_h) as u64;
    let s = input_size as u64;
    // round-half-up of dim * s / long, at least one pixel
    let resized = |dim: u32| (((dim as u64 * s * 2 + long) / (2 * long)).max(1)) as u32;
    let resized_w = resized(img_w);
    let resized_h = resized(img_h);
    Ok(LetterboxTransform {
        scale: T::ratio(input_size as i64, long as i64),
        pad_x: T::from_int(((input_size - resized_w) / 2) as i64),
        pad_y: T::from_int(((input_size - resized_h) / 2) as i64),
        input_size,
        resized_w,
        resized_h,
    })
}

impl<T: Scalar> LetterboxTransform<T> {
    pub fn identity(size: u32) -> Self {
        Self {
            scale: T::one(),
            pad_x: T::zero(),
            pad_y: T::zero(),
            input_size: size,
            resized_w: size,
            resized_h: size,
        }
    }

    /// Original image pixels to model-input pixels.
    pub fn map_box(&self, b: &BBox<T>) -> Result<BBox<T>, GeometryError> {
        BBox::new(
            b.x() * self.scale + self.pad_x,
            b.y() * self.scale + self.pad_y,
            b.w() * self.scale,
            b.h() * self.scale,
        )
    }

    /// Model-input pixels back to original image pixels.
    pub fn unmap_box(&self, b: &BBox<T>) -> Result<BBox<T>, GeometryError> {
        BBox::new(
            (b.x() - self.pad_x) / self.scale,
            (b.y() - self.pad_y) / self.scale,
            b.w() / self.scale,
            b.h() / self.scale,
        )
    }
}

/// Free-function form of [`LetterboxTransform::unmap_box`].
pub fn unmap_box<T: Scalar>(
    t: &LetterboxTransform<T>,
    b: &BBox<T>,
) -> Result<BBox<T>, GeometryError> {
    t.unmap_box(b)
}
