//! Synthetic ground-truth scenes and the network outputs they imply.
//!
//! Scenes are drawn with ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`),
//! so a `(parameters, seed)` pair always reproduces the same scene. Shapes
//! are placed one after another; by default a new shape occludes (carves
//! away) whatever it covers of earlier shapes, so masks stay disjoint while
//! boxes may overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{iou, AnchorConfig};
use crate::maps::{BinaryMask, MapError, OffsetMap, ProbMap};
use crate::targets::{build_targets, AnnotationDocument, InstanceAnnotation, TargetError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("placed {placed} of {requested} instances before running out of retries")]
    PlacementFailed { placed: usize, requested: usize },
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceAnnotation>,
    pub seed: u64,
}

impl Scene {
    pub fn to_document(&self) -> AnnotationDocument {
        AnnotationDocument::from_annotations(self.height, self.width, Some(self.seed), &self.instances)
    }

    pub fn from_document(doc: &AnnotationDocument) -> Result<Self, TargetError> {
        Ok(Self {
            height: doc.height,
            width: doc.width,
            instances: doc.to_annotations()?,
            seed: doc.seed.unwrap_or(0),
        })
    }

    pub fn non_crowd(&self) -> impl Iterator<Item = &InstanceAnnotation> {
        self.instances.iter().filter(|a| !a.is_crowd())
    }
}

/// Placement parameters. [`generate_scene`] uses [`SceneGenerator::for_canvas`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGenerator {
    /// Inclusive range of shape widths in pixels.
    pub width_range: (usize, usize),
    /// Inclusive range of height / width ratios.
    pub aspect_range: (f64, f64),
    /// Reject placements that leave any pair of boxes at or above this IoU.
    pub max_box_iou: Option<f64>,
    /// Keep at least this many background pixels (Chebyshev distance)
    /// between masks. `None` lets later shapes carve earlier ones.
    pub min_separation: Option<usize>,
    /// An occluded shape must keep at least this fraction of its pixels.
    pub min_visible: f64,
    pub max_retries: usize,
}

impl SceneGenerator {
    pub fn for_canvas(height: usize, width: usize) -> Self {
        let side = height.min(width);
        let lo = (side / 12).max(3);
        let hi = (side / 4).max(lo);
        Self {
            width_range: (lo, hi),
            aspect_range: (1.0, 2.0),
            max_box_iou: None,
            min_separation: None,
            min_visible: 0.5,
            max_retries: 500,
        }
    }

    fn validate(&self, height: usize, width: usize, n: usize) -> Result<(), SynthError> {
        let (lo, hi) = self.width_range;
        let (alo, ahi) = self.aspect_range;
        if n > 0 && (height == 0 || width == 0) {
            return Err(SynthError::InvalidParams("empty canvas".into()));
        }
        if lo == 0 || lo > hi {
            return Err(SynthError::InvalidParams(format!("width range {lo}..={hi}")));
        }
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return Err(SynthError::InvalidParams(format!("aspect range {alo}..={ahi}")));
        }
        if !(0.0..=1.0).contains(&self.min_visible) {
            return Err(SynthError::InvalidParams(format!("min_visible {}", self.min_visible)));
        }
        Ok(())
    }

    pub fn generate(
        &self,
        height: usize,
        width: usize,
        n_instances: usize,
        shape: ShapeKind,
        seed: u64,
    ) -> Result<Scene, SynthError> {
        self.validate(height, width, n_instances)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // owner[i] = 1 + index of the instance holding pixel i, 0 if free.
        let mut owner = vec![0u32; height * width];
        let mut areas: Vec<usize> = Vec::new();
        let mut original: Vec<usize> = Vec::new();

        for placed in 0..n_instances {
            let mut accepted = false;
            for _ in 0..self.max_retries {
                let pixels = self.draw_shape(&mut rng, height, width, shape);
                if self.try_place(&pixels, placed, height, width, &mut owner, &mut areas, &original) {
                    original.push(pixels.len());
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                return Err(SynthError::PlacementFailed { placed, requested: n_instances });
            }
        }

        let instances = (0..original.len())
            .map(|k| {
                let mask = BinaryMask::new(height, width, owner.iter().map(|&o| o == k as u32 + 1).collect())?;
                Ok(InstanceAnnotation::new(k as u32 + 1, mask, false)?)
            })
            .collect::<Result<Vec<_>, SynthError>>()?;
        Ok(Scene { height, width, instances, seed })
    }

    /// Row-major pixel indices of a random shape that fits the canvas.
    fn draw_shape(&self, rng: &mut ChaCha8Rng, height: usize, width: usize, shape: ShapeKind) -> Vec<usize> {
        let sw = rng.random_range(self.width_range.0..=self.width_range.1).min(width);
        let aspect = rng.random_range(self.aspect_range.0..=self.aspect_range.1);
        let sh = ((sw as f64 * aspect).round() as usize).clamp(1, height);
        let x0 = rng.random_range(0..=width - sw);
        let y0 = rng.random_range(0..=height - sh);
        let (cx, cy) = (x0 as f64 + (sw as f64 - 1.0) / 2.0, y0 as f64 + (sh as f64 - 1.0) / 2.0);
        let (a, b) = (sw as f64 / 2.0, sh as f64 / 2.0);
        let mut pixels = Vec::with_capacity(sw * sh);
        for r in y0..y0 + sh {
            for c in x0..x0 + sw {
                let inside = match shape {
                    ShapeKind::Rectangle => true,
                    ShapeKind::Ellipse => {
                        let (u, v) = ((c as f64 - cx) / a, (r as f64 - cy) / b);
                        u * u + v * v <= 1.0
                    }
                };
                if inside {
                    pixels.push(r * width + c);
                }
            }
        }
        pixels
    }

    #[allow(clippy::too_many_arguments)]
    fn try_place(
        &self,
        pixels: &[usize],
        index: usize,
        height: usize,
        width: usize,
        owner: &mut [u32],
        areas: &mut Vec<usize>,
        original: &[usize],
    ) -> bool {
        if pixels.is_empty() {
            return false;
        }
        if let Some(sep) = self.min_separation {
            for &p in pixels {
                let (r, c) = (p / width, p % width);
                for nr in r.saturating_sub(sep)..=(r + sep).min(height - 1) {
                    for nc in c.saturating_sub(sep)..=(c + sep).min(width - 1) {
                        if owner[nr * width + nc] != 0 {
                            return false;
                        }
                    }
                }
            }
        }

        let mut lost = vec![0usize; index];
        for &p in pixels {
            if owner[p] != 0 {
                lost[owner[p] as usize - 1] += 1;
            }
        }
        for k in 0..index {
            let left = areas[k] - lost[k];
            if left == 0 || (left as f64) < self.min_visible * original[k] as f64 {
                return false;
            }
        }

        let label = index as u32 + 1;
        let mut trial = owner.to_vec();
        for &p in pixels {
            trial[p] = label;
        }
        if let Some(limit) = self.max_box_iou {
            let boxes = pixel_boxes(&trial, height, width, index + 1);
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    if iou(&boxes[i], &boxes[j]) >= limit {
                        return false;
                    }
                }
            }
        }

        owner.copy_from_slice(&trial);
        for k in 0..index {
            areas[k] -= lost[k];
        }
        areas.push(pixels.len());
        true
    }
}

fn pixel_boxes(owner: &[u32], height: usize, width: usize, n: usize) -> Vec<crate::geometry::BBox> {
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for r in 0..height {
        for c in 0..width {
            let o = owner[r * width + c];
            if o > 0 {
                let b = &mut bounds[o as usize - 1];
                *b = (b.0.min(c), b.1.min(r), b.2.max(c), b.3.max(r));
            }
        }
    }
    bounds
        .into_iter()
        .map(|(c0, r0, c1, r1)| crate::geometry::BBox::from_pixel_bounds(c0, r0, c1, r1))
        .collect()
}

pub fn generate_scene(
    height: usize,
    width: usize,
    n_instances: usize,
    shape: ShapeKind,
    seed: u64,
) -> Result<Scene, SynthError> {
    SceneGenerator::for_canvas(height, width).generate(height, width, n_instances, shape, seed)
}

/// Perturbations applied to the ideal outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    /// Standard deviation of additive Gaussian noise on probabilities,
    /// clamped back into [0, 1].
    pub prob_noise_sd: f64,
    /// Standard deviation of additive Gaussian noise on every offset channel.
    pub offset_noise_sd: f64,
    /// Per-pixel probability of replacing `p` by `1 - p`.
    pub flip_rate: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec { prob_noise_sd: 0.0, offset_noise_sd: 0.0, flip_rate: 0.0 };

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.prob_noise_sd) || !ok(self.offset_noise_sd) || !ok(self.flip_rate) || self.flip_rate > 1.0 {
            return Err(SynthError::InvalidNoise(format!("{self:?}")));
        }
        Ok(())
    }
}

/// The probability and offset maps a perfect network would emit for
/// `scene`, optionally perturbed. Zero noise consumes no randomness.
pub fn oracle_outputs(
    scene: &Scene,
    noise: &NoiseSpec,
    cfg: &AnchorConfig,
    seed: u64,
) -> Result<(ProbMap, OffsetMap), SynthError> {
    noise.validate()?;
    let targets = build_targets(&scene.instances, scene.height, scene.width, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut prob = targets.seg.data().to_vec();
    if noise.flip_rate > 0.0 {
        for p in prob.iter_mut() {
            if rng.random_bool(noise.flip_rate) {
                *p = 1.0 - *p;
            }
        }
    }
    if noise.prob_noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise.prob_noise_sd).expect("validated sd");
        for p in prob.iter_mut() {
            *p = (*p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    let mut offsets = targets.offsets.data().to_vec();
    if noise.offset_noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise.offset_noise_sd).expect("validated sd");
        for v in offsets.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    Ok((
        ProbMap::new(scene.height, scene.width, prob)?,
        OffsetMap::new(scene.height, scene.width, offsets)?,
    ))
}
