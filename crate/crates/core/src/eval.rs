//! Column-major run-length mask encoding and COCO-style mask AP / AR.
//!
//! Matching follows the COCO protocol: detections are visited in descending
//! score order and each one takes the still-unmatched ground truth with the
//! highest mask IoU at or above the threshold. Crowd regions are ignore
//! regions: their IoU is intersection over detection area, they may absorb
//! any number of detections, and detections they absorb count as neither
//! true nor false positives. AP is the mean of the interpolated precision
//! envelope sampled at 101 recall points.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError};
use crate::grouping::GroupingResult;
use crate::maps::BinaryMask;
use crate::synth::Scene;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RleError {
    #[error("run lengths sum to {actual}, mask has {expected} pixels")]
    SumMismatch { expected: u64, actual: u64 },
    #[error("zero-length run at position {index}")]
    ZeroRun { index: usize },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("IoU of two empty masks is undefined")]
    BothEmpty,
    #[error("no non-crowd ground truth to evaluate against")]
    NoGroundTruth,
    #[error(transparent)]
    Rle(#[from] RleError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Column-major run lengths, alternating background / foreground and
/// starting with background.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RleMask {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

impl RleMask {
    pub fn new(height: usize, width: usize, counts: Vec<u32>) -> Result<Self, RleError> {
        let expected = (height * width) as u64;
        let actual: u64 = counts.iter().map(|&c| c as u64).sum();
        if actual != expected {
            return Err(RleError::SumMismatch { expected, actual });
        }
        // Only a leading background run may be empty, and only when a
        // foreground run follows it.
        for (index, &c) in counts.iter().enumerate() {
            if c == 0 && (index > 0 || counts.len() == 1) {
                return Err(RleError::ZeroRun { index });
            }
        }
        Ok(Self { height, width, counts })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    if h * w > 0 {
        counts.push(run);
    }
    RleMask { height: h, width: w, counts }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, RleError> {
    let (h, w) = (rle.height, rle.width);
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(RleError::SumMismatch { expected: (h * w) as u64, actual: total });
    }
    let mut mask = BinaryMask::empty(h, w);
    let mut pos = 0usize;
    for (k, &run) in rle.counts.iter().enumerate() {
        if k % 2 == 1 {
            for p in pos..pos + run as usize {
                mask.set(p % h, p / h, true);
            }
        }
        pos += run as usize;
    }
    Ok(mask)
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), EvalError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(EvalError::DimensionMismatch(a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

fn intersection(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count()
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, EvalError> {
    check_dims(a, b)?;
    let inter = intersection(a, b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return Err(EvalError::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

/// One scored instance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub bbox: BBox,
    pub mask: RleMask,
}

/// Prediction interchange record: `{"score":s,"box":[cx,cy,w,h],"rle":[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub rle: Vec<u32>,
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        Self { score: p.score, bbox: p.bbox.to_array(), rle: p.mask.counts.clone() }
    }
}

impl PredictionRecord {
    pub fn into_prediction(self, height: usize, width: usize) -> Result<Prediction, EvalError> {
        let [cx, cy, w, h] = self.bbox;
        Ok(Prediction {
            score: self.score,
            bbox: BBox::new(cx, cy, w, h)?,
            mask: RleMask::new(height, width, self.rle)?,
        })
    }
}

/// Predictions from a grouping result, in its (score-descending) order.
pub fn predictions_from_grouping(result: &GroupingResult) -> Vec<Prediction> {
    result
        .detections
        .iter()
        .map(|d| Prediction {
            score: d.score,
            bbox: d.bbox,
            mask: rle_encode(&result.labels.instance_mask(d.instance_id)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    /// Detection caps for AR; AP uses the largest.
    pub max_detections: Vec<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_detections: vec![1, 10, 100],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdAp {
    pub iou_threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapAr {
    pub max_detections: usize,
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub ap: Vec<ThresholdAp>,
    pub ap_mean: f64,
    pub ar: Vec<CapAr>,
}

impl EvalResult {
    pub fn ap_at(&self, iou_threshold: f64) -> Option<f64> {
        self.ap
            .iter()
            .find(|t| (t.iou_threshold - iou_threshold).abs() < 1e-9)
            .map(|t| t.ap)
    }

    pub fn ar_at(&self, max_detections: usize) -> Option<f64> {
        self.ar.iter().find(|a| a.max_detections == max_detections).map(|a| a.ar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Matching outcome for one image at one threshold, detections in rank order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

struct ImageEval {
    /// Sorted descending, truncated to the largest cap.
    scores: Vec<f64>,
    /// `outcomes[t][d]`.
    outcomes: Vec<Vec<Outcome>>,
    num_gt: usize,
}

fn rank_order(predictions: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    // Ties on score are broken by content so that insertion order never matters.
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&predictions[a], &predictions[b]);
        pb.score
            .total_cmp(&pa.score)
            .then_with(|| pa.mask.counts.cmp(&pb.mask.counts))
            .then_with(|| {
                pa.bbox
                    .to_array()
                    .iter()
                    .zip(pb.bbox.to_array())
                    .map(|(x, y)| x.total_cmp(&y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
    order
}

fn evaluate_image(
    predictions: &[Prediction],
    scene: &Scene,
    thresholds: &[f64],
    max_det: usize,
) -> Result<ImageEval, EvalError> {
    // Ground truth: non-crowd first, then crowd.
    let mut gts: Vec<(&BinaryMask, bool)> =
        scene.instances.iter().map(|a| (a.mask(), a.is_crowd())).collect();
    gts.sort_by_key(|g| g.1);
    for (m, _) in &gts {
        if m.height() != scene.height || m.width() != scene.width {
            return Err(EvalError::DimensionMismatch(m.height(), m.width(), scene.height, scene.width));
        }
    }
    let num_gt = gts.iter().filter(|g| !g.1).count();

    let mut order = rank_order(predictions);
    order.truncate(max_det);
    let mut dt_masks = Vec::with_capacity(order.len());
    for &i in &order {
        let p = &predictions[i];
        if p.mask.height != scene.height || p.mask.width != scene.width {
            return Err(EvalError::DimensionMismatch(
                p.mask.height,
                p.mask.width,
                scene.height,
                scene.width,
            ));
        }
        dt_masks.push(rle_decode(&p.mask)?);
    }

    let gt_areas: Vec<usize> = gts.iter().map(|g| g.0.count()).collect();
    let ious: Vec<Vec<f64>> = dt_masks
        .iter()
        .map(|dm| {
            let dt_area = dm.count();
            gts.iter()
                .zip(&gt_areas)
                .map(|((gm, crowd), &ga)| {
                    let inter = intersection(dm, gm);
                    let denom = if *crowd { dt_area } else { dt_area + ga - inter };
                    if denom == 0 {
                        0.0
                    } else {
                        inter as f64 / denom as f64
                    }
                })
                .collect()
        })
        .collect();

    let mut outcomes = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut gt_taken = vec![false; gts.len()];
        let mut row = Vec::with_capacity(dt_masks.len());
        for dt_ious in &ious {
            let mut best = thr.min(1.0 - 1e-10);
            let mut matched: Option<usize> = None;
            for (g, &(_, crowd)) in gts.iter().enumerate() {
                if gt_taken[g] && !crowd {
                    continue;
                }
                // Once a real instance matched, crowd regions cannot take over.
                if matches!(matched, Some(m) if !gts[m].1) && crowd {
                    break;
                }
                if dt_ious[g] < best {
                    continue;
                }
                best = dt_ious[g];
                matched = Some(g);
            }
            row.push(match matched {
                Some(g) if gts[g].1 => Outcome::Ignored,
                Some(g) => {
                    gt_taken[g] = true;
                    Outcome::TruePositive
                }
                None => Outcome::FalsePositive,
            });
        }
        outcomes.push(row);
    }

    let scores = order.iter().map(|&i| predictions[i].score).collect();
    Ok(ImageEval { scores, outcomes, num_gt })
}

/// Raw precision/recall points at one threshold, pooled over images.
fn pooled_curve(images: &[ImageEval], t: usize, cap: usize) -> (Vec<PrPoint>, usize) {
    let mut pooled: Vec<(f64, Outcome)> = Vec::new();
    let mut num_gt = 0;
    for im in images {
        let n = im.scores.len().min(cap);
        pooled.extend(im.scores[..n].iter().copied().zip(im.outcomes[t][..n].iter().copied()));
        num_gt += im.num_gt;
    }
    // Stable: equal scores keep image order.
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (score, outcome) in pooled {
        match outcome {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        points.push(PrPoint {
            score,
            recall: tp as f64 / num_gt.max(1) as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    (points, num_gt)
}

fn interpolated_ap(points: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = points.partition_point(|p| p.recall < level);
        if idx < envelope.len() {
            total += envelope[idx];
        }
    }
    total / 101.0
}

/// Pools several images into one COCO evaluation.
pub fn evaluate_dataset(
    images: &[(&[Prediction], &Scene)],
    params: &EvalParams,
) -> Result<EvalResult, EvalError> {
    let cap = params.max_detections.iter().copied().max().unwrap_or(100);
    let evals = images
        .iter()
        .map(|(p, s)| evaluate_image(p, s, &params.iou_thresholds, cap))
        .collect::<Result<Vec<_>, _>>()?;
    if evals.iter().map(|e| e.num_gt).sum::<usize>() == 0 {
        return Err(EvalError::NoGroundTruth);
    }

    let ap: Vec<ThresholdAp> = params
        .iou_thresholds
        .iter()
        .enumerate()
        .map(|(t, &thr)| ThresholdAp { iou_threshold: thr, ap: interpolated_ap(&pooled_curve(&evals, t, cap).0) })
        .collect();
    let ap_mean = ap.iter().map(|a| a.ap).sum::<f64>() / ap.len().max(1) as f64;

    let ar = params
        .max_detections
        .iter()
        .map(|&m| {
            let recalls: Vec<f64> = (0..params.iou_thresholds.len())
                .map(|t| pooled_curve(&evals, t, m).0.last().map_or(0.0, |p| p.recall))
                .collect();
            CapAr { max_detections: m, ar: recalls.iter().sum::<f64>() / recalls.len().max(1) as f64 }
        })
        .collect();

    Ok(EvalResult { ap, ap_mean, ar })
}

pub fn evaluate(
    predictions: &[Prediction],
    ground_truth: &Scene,
    params: &EvalParams,
) -> Result<EvalResult, EvalError> {
    evaluate_dataset(&[(predictions, ground_truth)], params)
}

/// Raw (non-interpolated) precision/recall sequence at one IoU threshold.
pub fn precision_recall_curve(
    predictions: &[Prediction],
    ground_truth: &Scene,
    iou_threshold: f64,
    max_detections: usize,
) -> Result<Vec<PrPoint>, EvalError> {
    let im = evaluate_image(predictions, ground_truth, &[iou_threshold], max_detections)?;
    if im.num_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(pooled_curve(&[im], 0, max_detections).0)
}
