//! Axis-aligned boxes, IoU, per-pixel anchors and the anchor-relative
//! offset transform.
//!
//! Pixel `(x, y)` is centered on the integer coordinate `(x, y)` and covers
//! `[x - 0.5, x + 0.5] x [y - 0.5, y + 0.5]`. Anchors are centered on pixel
//! centers, and the tight box of a set of pixels spans the outer edges of its
//! extreme pixels.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box: cx={cx}, cy={cy}, w={w}, h={h}")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("non-finite offsets: ({dx}, {dy}, {dw}, {dh})")]
    NonFiniteOffsets { dx: f64, dy: f64, dw: f64, dh: f64 },
    #[error("invalid anchor config: scale={scale}, aspect={aspect}")]
    InvalidAnchor { scale: f64, aspect: f64 },
}

/// Axis-aligned rectangle in center form, continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let ok = cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite();
        // The corner form must also be non-degenerate after rounding.
        if !ok || w <= 0.0 || h <= 0.0 || cx - w / 2.0 >= cx + w / 2.0 || cy - h / 2.0 >= cy + h / 2.0
        {
            return Err(GeometryError::InvalidBox { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// Tight box around the inclusive pixel range `[col_min, col_max] x [row_min, row_max]`.
    pub fn from_pixel_bounds(col_min: usize, row_min: usize, col_max: usize, row_max: usize) -> Self {
        debug_assert!(col_min <= col_max && row_min <= row_max);
        let w = (col_max - col_min + 1) as f64;
        let h = (row_max - row_min + 1) as f64;
        Self {
            cx: (col_min + col_max) as f64 / 2.0,
            cy: (row_min + row_max) as f64 / 2.0,
            w,
            h,
        }
    }

    #[inline]
    pub fn cx(&self) -> f64 {
        self.cx
    }

    #[inline]
    pub fn cy(&self) -> f64 {
        self.cy
    }

    #[inline]
    pub fn w(&self) -> f64 {
        self.w
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    /// `[x0, y0, x1, y1]`.
    #[inline]
    pub fn corners(&self) -> [f64; 4] {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, tx: f64, ty: f64) -> Result<Self, GeometryError> {
        Self::new(self.cx + tx, self.cy + ty, self.w, self.h)
    }

    /// Scales every coordinate and size about the origin.
    pub fn scaled(&self, s: f64) -> Result<Self, GeometryError> {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Intersection over union of two boxes. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    corner_iou(&ca, a.area(), &cb, b.area())
}

/// IoU on precomputed corners and areas; the grouping kernel calls this in
/// its inner loop.
#[inline]
pub(crate) fn corner_iou(a: &[f64; 4], area_a: f64, b: &[f64; 4], area_b: f64) -> f64 {
    // Branch-free so every pair costs the same.
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    (inter / (area_a + area_b - inter)).min(1.0)
}

/// Anchor-relative box offsets: center shifts in units of the anchor size,
/// size changes in log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxOffsets {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxOffsets {
    pub const ZERO: BoxOffsets = BoxOffsets { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Result<Self, GeometryError> {
        let off = Self { dx, dy, dw, dh };
        if off.is_finite() {
            Ok(off)
        } else {
            Err(GeometryError::NonFiniteOffsets { dx, dy, dw, dh })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dw.is_finite() && self.dh.is_finite()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

/// The single prior box shape attached to every pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorConfig {
    scale: f64,
    aspect: f64,
}

impl AnchorConfig {
    /// `scale` is the square root of the anchor area, `aspect` is height / width.
    pub fn new(scale: f64, aspect: f64) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && aspect.is_finite() && scale > 0.0 && aspect > 0.0) {
            return Err(GeometryError::InvalidAnchor { scale, aspect });
        }
        Ok(Self { scale, aspect })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn aspect(&self) -> f64 {
        self.aspect
    }

    pub fn width(&self) -> f64 {
        self.scale / self.aspect.sqrt()
    }

    pub fn height(&self) -> f64 {
        self.scale * self.aspect.sqrt()
    }
}

impl Default for AnchorConfig {
    /// 96² pixel area, 1.5 height-to-width ratio.
    fn default() -> Self {
        Self { scale: 96.0, aspect: 1.5 }
    }
}

/// Anchor box centered on pixel `(x, y)`.
pub fn anchor_at(x: usize, y: usize, cfg: &AnchorConfig) -> BBox {
    BBox { cx: x as f64, cy: y as f64, w: cfg.width(), h: cfg.height() }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> BoxOffsets {
    BoxOffsets {
        dx: (gt.cx - anchor.cx) / anchor.w,
        dy: (gt.cy - anchor.cy) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dh: (gt.h / anchor.h).ln(),
    }
}

/// Inverse of [`encode`]. Fails on non-finite offsets, and when the decoded
/// size overflows or underflows to an invalid box.
pub fn decode(off: &BoxOffsets, anchor: &BBox) -> Result<BBox, GeometryError> {
    if !off.is_finite() {
        return Err(GeometryError::NonFiniteOffsets { dx: off.dx, dy: off.dy, dw: off.dw, dh: off.dh });
    }
    BBox::new(
        anchor.cx + off.dx * anchor.w,
        anchor.cy + off.dy * anchor.h,
        anchor.w * off.dw.exp(),
        anchor.h * off.dh.exp(),
    )
}
