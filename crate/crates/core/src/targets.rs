//! Per-pixel training targets built from instance annotations: the binary
//! segmentation target, the anchor-relative offset field, and the mask that
//! restricts the offset loss to non-crowd instance pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{rle_decode, rle_encode, RleError, RleMask};
use crate::geometry::{anchor_at, encode, AnchorConfig, BBox};
use crate::maps::{BinaryMask, MapError, OffsetMap, ProbMap, ValidityMask};

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("instance {0} has an empty mask")]
    EmptyMask(u32),
    #[error("instance id must be positive")]
    ZeroId,
    #[error("instance {id} mask is {mask_h}x{mask_w}, canvas is {height}x{width}")]
    OutOfBounds { id: u32, mask_h: usize, mask_w: usize, height: usize, width: usize },
    #[error("non-crowd instances {a} and {b} overlap at row {row}, col {col}")]
    Overlap { a: u32, b: u32, row: usize, col: usize },
    #[error(transparent)]
    Rle(#[from] RleError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("annotation JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// One ground-truth instance. The box is always recomputed from the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    id: u32,
    mask: BinaryMask,
    bbox: BBox,
    is_crowd: bool,
}

impl InstanceAnnotation {
    pub fn new(id: u32, mask: BinaryMask, is_crowd: bool) -> Result<Self, TargetError> {
        if id == 0 {
            return Err(TargetError::ZeroId);
        }
        let (c0, r0, c1, r1) = mask.pixel_bounds().ok_or(TargetError::EmptyMask(id))?;
        let bbox = BBox::from_pixel_bounds(c0, r0, c1, r1);
        Ok(Self { id, mask, bbox, is_crowd })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn is_crowd(&self) -> bool {
        self.is_crowd
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTargets {
    /// 1.0 on any annotated pixel (crowd included), 0.0 elsewhere.
    pub seg: ProbMap,
    pub offsets: OffsetMap,
    pub offset_mask: ValidityMask,
}

pub fn build_targets(
    annotations: &[InstanceAnnotation],
    height: usize,
    width: usize,
    cfg: &AnchorConfig,
) -> Result<TrainingTargets, TargetError> {
    let n = height * width;
    let mut seg = vec![0.0f32; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];

    for (k, ann) in annotations.iter().enumerate() {
        let m = &ann.mask;
        if m.height() != height || m.width() != width {
            return Err(TargetError::OutOfBounds {
                id: ann.id,
                mask_h: m.height(),
                mask_w: m.width(),
                height,
                width,
            });
        }
        for (i, _) in m.data().iter().enumerate().filter(|(_, &b)| b) {
            seg[i] = 1.0;
            if ann.is_crowd {
                continue;
            }
            if let Some(prev) = owner[i] {
                return Err(TargetError::Overlap {
                    a: annotations[prev].id,
                    b: ann.id,
                    row: i / width,
                    col: i % width,
                });
            }
            owner[i] = Some(k);
        }
    }

    let mut offsets = OffsetMap::zeros(height, width);
    let mut valid = vec![false; n];
    for (i, k) in owner.iter().enumerate() {
        let Some(k) = *k else { continue };
        let (row, col) = (i / width, i % width);
        let off = encode(&annotations[k].bbox, &anchor_at(col, row, cfg));
        offsets.set(row, col, &off)?;
        valid[i] = true;
    }

    Ok(TrainingTargets {
        seg: ProbMap::new(height, width, seg)?,
        offsets,
        offset_mask: BinaryMask::new(height, width, valid)?,
    })
}

/// JSON form of one annotation: masks travel as column-major RLE counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u32,
    #[serde(default)]
    pub is_crowd: bool,
    pub rle: Vec<u32>,
}

/// `{"height":H,"width":W,"instances":[...]}`, optionally carrying the
/// generator seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDocument {
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub instances: Vec<AnnotationRecord>,
}

impl AnnotationDocument {
    pub fn from_annotations(
        height: usize,
        width: usize,
        seed: Option<u64>,
        annotations: &[InstanceAnnotation],
    ) -> Self {
        let instances = annotations
            .iter()
            .map(|a| AnnotationRecord {
                id: a.id,
                is_crowd: a.is_crowd,
                rle: rle_encode(&a.mask).counts().to_vec(),
            })
            .collect();
        Self { height, width, seed, instances }
    }

    pub fn to_annotations(&self) -> Result<Vec<InstanceAnnotation>, TargetError> {
        self.instances
            .iter()
            .map(|rec| {
                let rle = RleMask::new(self.height, self.width, rec.rle.clone())?;
                InstanceAnnotation::new(rec.id, rle_decode(&rle)?, rec.is_crowd)
            })
            .collect()
    }
}
