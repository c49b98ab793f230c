//! COCO-style single-class detection evaluation.
//!
//! Detections are matched greedily per image in descending score order, each
//! taking the still-unmatched ground-truth box with the highest IoU (lowest
//! index on ties) when that IoU reaches the threshold. Per threshold, AP is
//! the 101-point interpolated precision envelope and recall is the fraction
//! of ground truth matched with at most [`MAX_DETS`] detections per image.
//! mAP / mAR average those over IoU 0.50:0.05:0.95; mAF is their harmonic mean.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, score_order, BBox, Detection, GeometryError};
use crate::scalar::Scalar;

pub const MAX_DETS: usize = 100;
pub const RECALL_POINTS: usize = 101;
pub const IOU_THRESHOLD_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction references unknown image id {0:?}")]
    UnknownImageId(String),
    #[error("duplicate curve entry for model {model:?} at train size {train_size}")]
    DuplicateKey { model: String, train_size: usize },
    #[error("no reports to aggregate")]
    EmptyCurve,
    #[error("line {line}: {reason}")]
    MalformedPrediction { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds<T: Scalar>() -> Vec<T> {
    (0..IOU_THRESHOLD_COUNT as i64)
        .map(|i| T::ratio(50 + 5 * i, 100))
        .collect()
}

/// Ground-truth boxes per image, in evaluation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth<T> {
    images: Vec<(String, Vec<BBox<T>>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn new() -> Self {
        Self {
            images: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds an image; boxes for an id already present are appended.
    pub fn push(&mut self, image_id: impl Into<String>, boxes: Vec<BBox<T>>) {
        let id = image_id.into();
        match self.index.get(&id) {
            Some(&i) => self.images[i].1.extend(boxes),
            None => {
                self.index.insert(id.clone(), self.images.len());
                self.images.push((id, boxes));
            }
        }
    }

    pub fn images(&self) -> &[(String, Vec<BBox<T>>)] {
        &self.images
    }

    pub fn n_gt(&self) -> usize {
        self.images.iter().map(|(_, b)| b.len()).sum()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePredictions<T> {
    pub image_id: String,
    pub detections: Vec<Detection<T>>,
}

pub type PredictionSet<T> = Vec<ImagePredictions<T>>;

/// One detection's outcome at a single IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetMatch<T> {
    /// Index into the image's detection list as supplied.
    pub det_index: usize,
    pub score: T,
    pub gt_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch<T> {
    pub image_id: String,
    /// Evaluated detections in descending score order, at most [`MAX_DETS`].
    pub detections: Vec<DetMatch<T>>,
    pub n_gt: usize,
    pub unmatched_gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T> {
    pub iou_thr: T,
    /// Same order as the ground truth images.
    pub images: Vec<ImageMatch<T>>,
}

impl<T: Scalar> MatchResult<T> {
    pub fn n_gt(&self) -> usize {
        self.images.iter().map(|m| m.n_gt).sum()
    }

    pub fn n_matched(&self) -> usize {
        self.images.iter().map(|m| m.n_gt - m.unmatched_gt).sum()
    }
}

/// Detections of one image, score-sorted and truncated, with their IoU rows.
struct PreparedImage<T> {
    order: Vec<usize>,
    scores: Vec<T>,
    /// `ious[d][g]` for the `d`-th evaluated detection.
    ious: Vec<Vec<T>>,
    n_gt: usize,
}

fn prepare<T: Scalar>(
    preds: &[ImagePredictions<T>],
    gts: &GroundTruth<T>,
) -> Result<Vec<PreparedImage<T>>, EvalError> {
    let mut per_image: Vec<Vec<Detection<T>>> = vec![Vec::new(); gts.images.len()];
    for p in preds {
        let i = gts
            .position(&p.image_id)
            .ok_or_else(|| EvalError::UnknownImageId(p.image_id.clone()))?;
        per_image[i].extend_from_slice(&p.detections);
    }
    Ok(per_image
        .into_iter()
        .zip(&gts.images)
        .map(|(dets, (_, gt_boxes))| {
            let mut order = score_order(dets.iter().map(|d| d.score()));
            order.truncate(MAX_DETS);
            PreparedImage {
                scores: order.iter().map(|&i| dets[i].score()).collect(),
                ious: order
                    .iter()
                    .map(|&i| gt_boxes.iter().map(|g| iou(&dets[i].bbox, g)).collect())
                    .collect(),
                order,
                n_gt: gt_boxes.len(),
            }
        })
        .collect())
}

fn match_prepared<T: Scalar>(
    prepared: &[PreparedImage<T>],
    gts: &GroundTruth<T>,
    iou_thr: T,
) -> MatchResult<T> {
    let images = prepared
        .iter()
        .zip(&gts.images)
        .map(|(p, (id, _))| {
            let mut taken = vec![false; p.n_gt];
            let detections = p
                .order
                .iter()
                .zip(&p.scores)
                .zip(&p.ious)
                .map(|((&det_index, &score), row)| {
                    let mut best: Option<(usize, T)> = None;
                    for (g, &v) in row.iter().enumerate() {
                        if taken[g] || v < iou_thr {
                            continue;
                        }
                        if best.is_none_or(|(_, b)| v > b) {
                            best = Some((g, v));
                        }
                    }
                    let gt_index = best.map(|(g, _)| g);
                    if let Some(g) = gt_index {
                        taken[g] = true;
                    }
                    DetMatch {
                        det_index,
                        score,
                        gt_index,
                    }
                })
                .collect();
            ImageMatch {
                image_id: id.clone(),
                detections,
                n_gt: p.n_gt,
                unmatched_gt: taken.iter().filter(|t| !**t).count(),
            }
        })
        .collect();
    MatchResult { iou_thr, images }
}

/// Greedy matching of predictions to ground truth at one IoU threshold.
pub fn match_detections<T: Scalar>(
    preds: &[ImagePredictions<T>],
    gts: &GroundTruth<T>,
    iou_thr: T,
) -> Result<MatchResult<T>, EvalError> {
    let prepared = prepare(preds, gts)?;
    Ok(match_prepared(&prepared, gts, iou_thr))
}

/// 101-point interpolated average precision, as a fraction.
///
/// Zero when there is no ground truth.
pub fn average_precision<T: Scalar>(m: &MatchResult<T>) -> T {
    let n_gt = m.n_gt();
    if n_gt == 0 {
        return T::zero();
    }
    // stable: equal scores stay in (image order, rank) order
    let mut all: Vec<(T, bool)> = m
        .images
        .iter()
        .flat_map(|im| im.detections.iter().map(|d| (d.score, d.gt_index.is_some())))
        .collect();
    let order = score_order(all.iter().map(|(s, _)| *s));
    all = order.into_iter().map(|i| all[i]).collect();

    let n_gt_s = T::from_int(n_gt as i64);
    let mut recall = Vec::with_capacity(all.len());
    let mut precision = Vec::with_capacity(all.len());
    let (mut tp, mut fp) = (0i64, 0i64);
    for (_, hit) in &all {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(T::from_int(tp) / n_gt_s);
        precision.push(T::from_int(tp) / T::from_int(tp + fp));
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max_of(precision[i + 1]);
    }
    let mut sum = T::zero();
    for k in 0..RECALL_POINTS as i64 {
        let r = T::ratio(k, 100);
        let i = recall.partition_point(|v| *v < r);
        if i < precision.len() {
            sum = sum + precision[i];
        }
    }
    sum / T::from_int(RECALL_POINTS as i64)
}

/// Fraction of ground truth matched. Zero when there is no ground truth.
pub fn recall<T: Scalar>(m: &MatchResult<T>) -> T {
    let n_gt = m.n_gt();
    if n_gt == 0 {
        return T::zero();
    }
    T::from_int(m.n_matched() as i64) / T::from_int(n_gt as i64)
}

/// Harmonic mean of mAP and mAR; zero when both are zero.
pub fn maf<T: Scalar>(map: T, mar: T) -> T {
    let sum = map + mar;
    if sum <= T::zero() {
        return T::zero();
    }
    T::from_int(2) * map * mar / sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouRow<T> {
    pub iou: T,
    pub ap: T,
    pub recall: T,
}

/// Aggregate metrics. `map`, `mar` and `maf` are percentages; the per-threshold
/// rows are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<T> {
    pub map: T,
    pub mar: T,
    pub maf: T,
    pub per_iou: Vec<IouRow<T>>,
    pub max_dets: usize,
    pub n_images: usize,
    pub n_gt: usize,
}

pub fn evaluate<T: Scalar>(
    preds: &[ImagePredictions<T>],
    gts: &GroundTruth<T>,
) -> Result<EvalReport<T>, EvalError> {
    let prepared = prepare(preds, gts)?;
    let per_iou: Vec<IouRow<T>> = iou_thresholds::<T>()
        .into_iter()
        .map(|thr| {
            let m = match_prepared(&prepared, gts, thr);
            IouRow {
                iou: thr,
                ap: average_precision(&m),
                recall: recall(&m),
            }
        })
        .collect();
    let n = T::from_int(per_iou.len() as i64);
    let hundred = T::from_int(100);
    let map = per_iou.iter().fold(T::zero(), |acc, r| acc + r.ap) / n * hundred;
    let mar = per_iou.iter().fold(T::zero(), |acc, r| acc + r.recall) / n * hundred;
    Ok(EvalReport {
        map,
        mar,
        maf: maf(map, mar),
        per_iou,
        max_dets: MAX_DETS,
        n_images: gts.images.len(),
        n_gt: gts.n_gt(),
    })
}

// ---------------------------------------------------------------------------
// learning curves

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub model: String,
    pub train_size: usize,
    pub map: f64,
    pub mar: f64,
    pub maf: f64,
}

/// Sorts reports by (model, train size) and rejects duplicate keys.
pub fn curve_aggregate(
    reports: &[(usize, String, EvalReport<f64>)],
) -> Result<Vec<CurvePoint>, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    let mut rows: BTreeMap<(String, usize), CurvePoint> = BTreeMap::new();
    for (train_size, model, r) in reports {
        let key = (model.clone(), *train_size);
        if rows.contains_key(&key) {
            return Err(EvalError::DuplicateKey {
                model: model.clone(),
                train_size: *train_size,
            });
        }
        rows.insert(
            key,
            CurvePoint {
                model: model.clone(),
                train_size: *train_size,
                map: r.map,
                mar: r.mar,
                maf: r.maf,
            },
        );
    }
    Ok(rows.into_values().collect())
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("model,train_size,map,mar,maf\n");
    for p in points {
        writeln!(s, "{},{},{},{},{}", p.model, p.train_size, p.map, p.mar, p.maf).unwrap();
    }
    s
}

// ---------------------------------------------------------------------------
// prediction files

/// Scored pixel box as it appears in JSON payloads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl BoxRecord {
    pub fn to_detection(self) -> Result<Detection<f64>, GeometryError> {
        Detection::new(BBox::new(self.x, self.y, self.w, self.h)?, self.score)
    }
}

impl From<&Detection<f64>> for BoxRecord {
    fn from(d: &Detection<f64>) -> Self {
        Self {
            x: d.bbox.x(),
            y: d.bbox.y(),
            w: d.bbox.w(),
            h: d.bbox.h(),
            score: d.score(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub image_id: String,
    pub boxes: Vec<BoxRecord>,
}

pub fn read_predictions(reader: impl BufRead) -> Result<PredictionSet<f64>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::MalformedPrediction { line: i + 1, reason };
        let rec: PredictionLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let detections = rec
            .boxes
            .into_iter()
            .map(|b| b.to_detection().map_err(|e| bad(e.to_string())))
            .collect::<Result<_, _>>()?;
        out.push(ImagePredictions {
            image_id: rec.image_id,
            detections,
        });
    }
    Ok(out)
}

pub fn write_predictions(mut w: impl Write, preds: &[ImagePredictions<f64>]) -> std::io::Result<()> {
    for p in preds {
        let line = PredictionLine {
            image_id: p.image_id.clone(),
            boxes: p.detections.iter().map(BoxRecord::from).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(x, y, w, h).unwrap()
    }

    fn det(b: BBox<f64>, s: f64) -> Detection<f64> {
        Detection::new(b, s).unwrap()
    }

    fn single(gt: Vec<BBox<f64>>, dets: Vec<Detection<f64>>) -> (PredictionSet<f64>, GroundTruth<f64>) {
        let mut g = GroundTruth::new();
        g.push("a", gt);
        (
            vec![ImagePredictions {
                image_id: "a".into(),
                detections: dets,
            }],
            g,
        )
    }

    // prediction (0,0,10,10) against gt (0,0,10,6.2): IoU = 62/100
    fn iou_062() -> (PredictionSet<f64>, GroundTruth<f64>) {
        let g = bb(0.0, 0.0, 10.0, 6.2);
        let p = bb(0.0, 0.0, 10.0, 10.0);
        assert!((iou(&g, &p) - 0.62).abs() < 1e-12);
        single(vec![g], vec![det(p, 0.9)])
    }

    #[test]
    fn match_identity() {
        let (_, g) = single(vec![bb(0.0, 0.0, 5.0, 5.0), bb(10.0, 0.0, 5.0, 5.0)], vec![]);
        let p = vec![ImagePredictions {
            image_id: "a".into(),
            detections: g.images()[0].1.iter().map(|b| det(*b, 1.0)).collect(),
        }];
        let m = match_detections(&p, &g, 0.5).unwrap();
        assert_eq!(m.images[0].unmatched_gt, 0);
        assert_eq!(m.images[0].detections[1].gt_index, Some(1));
    }

    #[test]
    fn match_threshold_comparison() {
        let (p, g) = iou_062();
        assert_eq!(match_detections(&p, &g, 0.60).unwrap().images[0].unmatched_gt, 0);
        assert_eq!(match_detections(&p, &g, 0.65).unwrap().images[0].unmatched_gt, 1);
    }

    #[test]
    fn match_prefers_highest_iou_unmatched_gt() {
        let g0 = bb(0.0, 0.0, 10.0, 10.0);
        let g1 = bb(1.0, 0.0, 10.0, 10.0);
        // first detection sits exactly on g1; second is closer to g0 but g1 is taken either way
        let (p, g) = single(vec![g0, g1], vec![det(g1, 0.9), det(bb(0.5, 0.0, 10.0, 10.0), 0.8)]);
        let m = match_detections(&p, &g, 0.5).unwrap();
        let d = &m.images[0].detections;
        assert_eq!((d[0].gt_index, d[1].gt_index), (Some(1), Some(0)));
    }

    #[test]
    fn unknown_image_is_an_error() {
        let (mut p, g) = iou_062();
        p[0].image_id = "zzz".into();
        assert!(matches!(evaluate(&p, &g), Err(EvalError::UnknownImageId(id)) if id == "zzz"));
    }

    #[test]
    fn ap_examples() {
        let g0 = bb(0.0, 0.0, 10.0, 10.0);
        let g1 = bb(50.0, 0.0, 10.0, 10.0);
        let fp = bb(100.0, 100.0, 10.0, 10.0);

        let (p, g) = single(vec![g0, g1], vec![det(g0, 0.9), det(g1, 0.8)]);
        assert_eq!(average_precision(&match_detections(&p, &g, 0.5).unwrap()), 1.0);

        let (p, g) = single(vec![g0], vec![]);
        assert_eq!(average_precision(&match_detections(&p, &g, 0.5).unwrap()), 0.0);

        // [TP@0.9, FP@0.8, TP@0.7] over 2 gt -> (51 * 1 + 50 * 2/3) / 101
        let (p, g) = single(vec![g0, g1], vec![det(g0, 0.9), det(fp, 0.8), det(g1, 0.7)]);
        let ap = average_precision(&match_detections(&p, &g, 0.5).unwrap());
        let expected = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-12, "{ap}");
        assert!((ap - 0.835).abs() < 1e-3);
    }

    #[test]
    fn evaluate_perfect() {
        let boxes = vec![bb(0.0, 0.0, 5.0, 5.0), bb(10.0, 0.0, 5.0, 5.0)];
        let (p, g) = single(boxes.clone(), boxes.iter().map(|b| det(*b, 1.0)).collect());
        let r = evaluate(&p, &g).unwrap();
        assert_eq!((r.map, r.mar, r.maf), (100.0, 100.0, 100.0));
        assert_eq!(r.n_gt, 2);
    }

    #[test]
    fn evaluate_single_partial_match() {
        let (p, g) = iou_062();
        let r = evaluate(&p, &g).unwrap();
        let hits: Vec<bool> = r.per_iou.iter().map(|row| row.recall == 1.0).collect();
        assert_eq!(hits, [true, true, true, false, false, false, false, false, false, false]);
        for v in [r.map, r.mar, r.maf] {
            assert!((v - 30.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn maf_examples() {
        assert_eq!(format!("{:.1}", maf(63.8, 74.0)), "68.5");
        assert_eq!(format!("{:.1}", maf(66.9, 76.3)), "71.3");
        assert!((maf(63.8f64, 74.0) - 68.52).abs() < 0.005);
        assert_eq!(maf(0.0f64, 0.0), 0.0);
    }

    #[test]
    fn no_ground_truth_scores_zero() {
        let (p, g) = single(vec![], vec![det(bb(0.0, 0.0, 1.0, 1.0), 0.5)]);
        let r = evaluate(&p, &g).unwrap();
        assert_eq!((r.map, r.mar, r.maf), (0.0, 0.0, 0.0));
    }

    #[test]
    fn max_dets_truncates_per_image() {
        let target = bb(0.0, 0.0, 10.0, 10.0);
        let mut dets: Vec<_> = (0..MAX_DETS)
            .map(|i| det(bb(100.0 + 20.0 * i as f64, 0.0, 10.0, 10.0), 0.9))
            .collect();
        dets.push(det(target, 0.1));
        let (p, g) = single(vec![target], dets);
        assert_eq!(evaluate(&p, &g).unwrap().mar, 0.0);
    }

    #[test]
    fn curve_rows() {
        let (p, g) = iou_062();
        let r = evaluate(&p, &g).unwrap();
        let input = vec![
            (400, "d0".to_string(), r.clone()),
            (50, "d0".to_string(), r.clone()),
            (100, "a".to_string(), r.clone()),
        ];
        let rows = curve_aggregate(&input).unwrap();
        let keys: Vec<_> = rows.iter().map(|p| (p.model.as_str(), p.train_size)).collect();
        assert_eq!(keys, [("a", 100), ("d0", 50), ("d0", 400)]);
        assert!(curve_csv(&rows).starts_with("model,train_size,map,mar,maf\na,100,"));
        assert_eq!(curve_aggregate(&input[..1]).unwrap().len(), 1);

        let dup = vec![(50, "d0".to_string(), r.clone()), (50, "d0".to_string(), r)];
        assert!(matches!(curve_aggregate(&dup), Err(EvalError::DuplicateKey { train_size: 50, .. })));
        assert!(matches!(curve_aggregate(&[]), Err(EvalError::EmptyCurve)));
    }

    #[test]
    fn prediction_lines_round_trip() {
        let (p, _) = iou_062();
        let mut buf = Vec::new();
        write_predictions(&mut buf, &p).unwrap();
        assert_eq!(read_predictions(&buf[..]).unwrap(), p);
        let bad = b"{\"image_id\":\"a\",\"boxes\":[{\"x\":0,\"y\":0,\"w\":-1,\"h\":1,\"score\":0.5}]}\n";
        assert!(matches!(read_predictions(&bad[..]), Err(EvalError::MalformedPrediction { line: 1, .. })));
    }
}
