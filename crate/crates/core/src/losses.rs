//! Training losses with analytic gradients: mean logistic loss on
//! segmentation logits, and masked L1 on box offsets.

use thiserror::Error;

use crate::maps::{OffsetMap, ProbMap, ValidityMask};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("segmentation target at element {index} is {value}, expected 0 or 1")]
    NonBinaryTarget { index: usize, value: f32 },
    #[error("non-finite input at element {index}")]
    NonFinite { index: usize },
}

/// Dense f64 field, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.len() != height * width * channels {
            return Err(LossError::ShapeMismatch(format!(
                "{height}x{width}x{channels} field with {} values",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite { index });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }
}

impl From<&OffsetMap> for Field {
    fn from(m: &OffsetMap) -> Self {
        Self { height: m.height(), width: m.width(), channels: 4, data: m.data().iter().map(|&v| v as f64).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub seg_loss: f64,
    pub offset_loss: f64,
    /// `seg_loss + offset_weight * offset_loss`.
    pub total: f64,
    pub seg_grad: Field,
    pub offset_grad: Field,
}

#[inline]
fn softplus(z: f64) -> f64 {
    // log(1 + e^z) without overflow.
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss over all pixels, on logits. Returns the loss and its
/// gradient with respect to the logits.
pub fn seg_loss(logits: &Field, target: &ProbMap) -> Result<(f64, Field), LossError> {
    if logits.channels != 1 || logits.height != target.height() || logits.width != target.width() {
        return Err(LossError::ShapeMismatch(format!(
            "logits {}x{}x{} vs target {}x{}",
            logits.height,
            logits.width,
            logits.channels,
            target.height(),
            target.width()
        )));
    }
    if let Some((index, &value)) = target.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(LossError::NonBinaryTarget { index, value });
    }
    let n = logits.data.len();
    let scale = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&z, &y) in logits.data.iter().zip(target.data()) {
        let y = y as f64;
        loss += softplus(z) - y * z;
        grad.push((sigmoid(z) - y) * scale);
    }
    Ok((loss * scale, Field { height: logits.height, width: logits.width, channels: 1, data: grad }))
}

/// Sum of absolute offset errors over masked pixels, divided by the number
/// of masked pixels (at least 1). Subgradient uses `sign(0) = 0`.
pub fn offset_loss(pred: &Field, target: &Field, mask: &ValidityMask) -> Result<(f64, Field), LossError> {
    let same = pred.height == target.height
        && pred.width == target.width
        && pred.channels == 4
        && target.channels == 4
        && mask.height() == pred.height
        && mask.width() == pred.width;
    if !same {
        return Err(LossError::ShapeMismatch(format!(
            "pred {}x{}x{}, target {}x{}x{}, mask {}x{}",
            pred.height,
            pred.width,
            pred.channels,
            target.height,
            target.width,
            target.channels,
            mask.height(),
            mask.width()
        )));
    }
    let norm = 1.0 / mask.count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Field::zeros(pred.height, pred.width, 4);
    for (px, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
        for ch in 0..4 {
            let i = px * 4 + ch;
            let d = pred.data[i] - target.data[i];
            loss += d.abs();
            grad.data[i] = if d > 0.0 {
                norm
            } else if d < 0.0 {
                -norm
            } else {
                0.0
            };
        }
    }
    Ok((loss * norm, grad))
}

/// Both losses at once; `offset_weight` scales the offset term in `total`
/// and in the reported offset gradient.
pub fn combined_loss(
    logits: &Field,
    seg_target: &ProbMap,
    pred_offsets: &Field,
    target_offsets: &Field,
    mask: &ValidityMask,
    offset_weight: f64,
) -> Result<LossReport, LossError> {
    let (seg, seg_grad) = seg_loss(logits, seg_target)?;
    let (off, mut offset_grad) = offset_loss(pred_offsets, target_offsets, mask)?;
    offset_grad.data.iter_mut().for_each(|g| *g *= offset_weight);
    Ok(LossReport { seg_loss: seg, offset_loss: off, total: seg + offset_weight * off, seg_grad, offset_grad })
}
