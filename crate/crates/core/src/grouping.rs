//! Instance grouping from a probability map and a dense offset field.
//!
//! Two stages:
//! 1. Global boxes: decode the predicted box at every local peak of the
//!    probability map whose value reaches `t_c`, use the peak probability as
//!    its confidence, and run greedy NMS.
//! 2. Assignment: every pixel with probability at least `seg_threshold`
//!    decodes its own box and joins the global box it overlaps most, provided
//!    that IoU reaches `t_iou`. Pixels that overlap nothing well enough are
//!    dropped as false positives.
//!
//! Assignment costs one IoU per (foreground pixel, global box) pair.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{anchor_at, corner_iou, decode, iou, AnchorConfig, BBox};
use crate::maps::{BinaryMask, InstanceLabelMap, OffsetMap, ProbMap};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroupingError {
    #[error("map shapes differ: probabilities {prob:?}, offsets {offsets:?}")]
    ShapeMismatch { prob: (usize, usize), offsets: (usize, usize) },
    #[error("invalid grouping config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingConfig {
    /// Minimum peak probability for a box candidate.
    pub t_c: f64,
    /// NMS suppresses candidates whose IoU with a kept box exceeds this.
    pub nms_iou: f64,
    /// Minimum pixel-box to global-box IoU for assignment.
    pub t_iou: f64,
    /// Foreground cut on the probability map.
    pub seg_threshold: f64,
    pub max_detections: usize,
    pub anchor: AnchorConfig,
    /// Split the assignment loop across the rayon pool. Output is identical
    /// either way.
    pub parallel: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            t_c: 0.6,
            nms_iou: 0.4,
            t_iou: 0.5,
            seg_threshold: 0.5,
            max_detections: 20,
            anchor: AnchorConfig::default(),
            parallel: false,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<(), GroupingError> {
        for (name, v) in [
            ("t_c", self.t_c),
            ("nms_iou", self.nms_iou),
            ("t_iou", self.t_iou),
            ("seg_threshold", self.seg_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GroupingError::InvalidConfig(format!("{name}={v} outside [0, 1]")));
            }
        }
        if self.max_detections == 0 {
            return Err(GroupingError::InvalidConfig("max_detections must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Mean probability over the assigned pixels.
    pub score: f64,
    pub pixel_count: usize,
    pub instance_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingResult {
    /// Score-descending; `instance_id` is the 1-based position in this list.
    pub detections: Vec<Detection>,
    pub labels: InstanceLabelMap,
}

/// Pixels that are maximal in their 8-neighborhood and reach `t_c`.
///
/// On plateaus only pixels with no equal-valued neighbor earlier in row-major
/// order qualify. Sorted by score descending, then row-major.
pub fn find_peaks(prob: &ProbMap, t_c: f64) -> Vec<Peak> {
    let (h, w) = (prob.height(), prob.width());
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = prob.get(r, c);
            if (v as f64) < t_c {
                continue;
            }
            let mut is_peak = true;
            'nbrs: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let n = prob.get(nr as usize, nc as usize);
                    let earlier = dr < 0 || (dr == 0 && dc < 0);
                    if n > v || (earlier && n == v) {
                        is_peak = false;
                        break 'nbrs;
                    }
                }
            }
            if is_peak {
                peaks.push(Peak { row: r, col: c, score: v });
            }
        }
    }
    // Stable sort keeps row-major order among equal scores.
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks
}

/// Greedy NMS returning indices into `candidates`, in keep order.
///
/// Candidates are ranked by score (ties keep insertion order); a candidate is
/// dropped when its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms_indices(candidates: &[(BBox, f64)], iou_threshold: f64, max_detections: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_detections {
            break;
        }
        let suppressed = keep.iter().any(|&k| iou(&candidates[k].0, &candidates[i].0) > iou_threshold);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(candidates: &[(BBox, f64)], iou_threshold: f64, max_detections: usize) -> Vec<(BBox, f64)> {
    nms_indices(candidates, iou_threshold, max_detections)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

fn check_shapes(prob: &ProbMap, offsets: &OffsetMap) -> Result<(), GroupingError> {
    if prob.height() != offsets.height() || prob.width() != offsets.width() {
        return Err(GroupingError::ShapeMismatch {
            prob: (prob.height(), prob.width()),
            offsets: (offsets.height(), offsets.width()),
        });
    }
    Ok(())
}

/// Peak boxes after NMS, each with its peak probability. Peaks whose offsets
/// decode to an invalid box are skipped.
pub fn select_global_boxes(
    prob: &ProbMap,
    offsets: &OffsetMap,
    cfg: &GroupingConfig,
) -> Result<Vec<(BBox, f64)>, GroupingError> {
    check_shapes(prob, offsets)?;
    let candidates: Vec<(BBox, f64)> = find_peaks(prob, cfg.t_c)
        .into_iter()
        .filter_map(|p| {
            let anchor = anchor_at(p.col, p.row, &cfg.anchor);
            decode(&offsets.get(p.row, p.col), &anchor).ok().map(|b| (b, p.score as f64))
        })
        .collect();
    Ok(nms(&candidates, cfg.nms_iou, cfg.max_detections))
}

pub fn assign_pixels(
    prob: &ProbMap,
    offsets: &OffsetMap,
    global_boxes: &[BBox],
    cfg: &GroupingConfig,
) -> Result<GroupingResult, GroupingError> {
    assign_pixels_excluding(prob, offsets, global_boxes, cfg, None)
}

/// [`assign_pixels`] with an optional mask of pixels (e.g. crowd regions)
/// kept out of the foreground set.
pub fn assign_pixels_excluding(
    prob: &ProbMap,
    offsets: &OffsetMap,
    global_boxes: &[BBox],
    cfg: &GroupingConfig,
    exclude: Option<&BinaryMask>,
) -> Result<GroupingResult, GroupingError> {
    check_shapes(prob, offsets)?;
    let (h, w) = (prob.height(), prob.width());
    if let Some(m) = exclude {
        if m.height() != h || m.width() != w {
            return Err(GroupingError::ShapeMismatch { prob: (h, w), offsets: (m.height(), m.width()) });
        }
    }
    let globals: Vec<([f64; 4], f64)> = global_boxes.iter().map(|b| (b.corners(), b.area())).collect();

    // Tentative label per pixel: 1 + index of the winning global box.
    let mut tentative = vec![0u32; h * w];
    let label_row = |row: usize, out: &mut [u32]| {
        for (col, slot) in out.iter_mut().enumerate() {
            *slot = 0;
            if (prob.get(row, col) as f64) < cfg.seg_threshold || exclude.is_some_and(|m| m.get(row, col)) {
                continue;
            }
            let Ok(b) = decode(&offsets.get(row, col), &anchor_at(col, row, &cfg.anchor)) else {
                continue;
            };
            let (pc, pa) = (b.corners(), b.area());
            let mut best = (0usize, f64::NEG_INFINITY);
            for (k, (gc, ga)) in globals.iter().enumerate() {
                let v = corner_iou(&pc, pa, gc, *ga);
                if v > best.1 {
                    best = (k, v);
                }
            }
            if !globals.is_empty() && best.1 >= cfg.t_iou {
                *slot = best.0 as u32 + 1;
            }
        }
    };
    if w > 0 {
        if cfg.parallel {
            tentative.par_chunks_mut(w).enumerate().for_each(|(row, out)| label_row(row, out));
        } else {
            tentative.chunks_mut(w).enumerate().for_each(|(row, out)| label_row(row, out));
        }
    }

    // Row-major reduction keeps the sums independent of the thread count.
    let mut counts = vec![0usize; globals.len()];
    let mut sums = vec![0.0f64; globals.len()];
    for (i, &t) in tentative.iter().enumerate() {
        if t > 0 {
            counts[t as usize - 1] += 1;
            sums[t as usize - 1] += prob.data()[i] as f64;
        }
    }
    let mut kept: Vec<(usize, f64)> = (0..globals.len())
        .filter(|&k| counts[k] > 0)
        .map(|k| (k, sums[k] / counts[k] as f64))
        .collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut relabel = vec![0u32; globals.len() + 1];
    let detections = kept
        .iter()
        .enumerate()
        .map(|(pos, &(k, score))| {
            relabel[k + 1] = pos as u32 + 1;
            Detection { bbox: global_boxes[k], score, pixel_count: counts[k], instance_id: pos as u32 + 1 }
        })
        .collect();
    for t in tentative.iter_mut() {
        *t = relabel[*t as usize];
    }

    Ok(GroupingResult { detections, labels: InstanceLabelMap::from_raw(h, w, tentative) })
}

/// Full grouping: global box selection followed by pixel assignment.
pub fn group(prob: &ProbMap, offsets: &OffsetMap, cfg: &GroupingConfig) -> Result<GroupingResult, GroupingError> {
    cfg.validate()?;
    let global: Vec<BBox> = select_global_boxes(prob, offsets, cfg)?.into_iter().map(|(b, _)| b).collect();
    assign_pixels(prob, offsets, &global, cfg)
}
