//! Box algebra: the regression parameterization used by the prediction head,
//! its inverse, the per-component Smooth-L1 distances and IoU.
//!
//! All coordinates are fractions of the frame size. A box is stored as its
//! center and size, `(cx, cy, w, h)`. Conversion to pixels happens at the
//! I/O boundary only.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CtpError, Result};

/// Axis-aligned box in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// The whole frame.
    pub const fn full() -> Self {
        Self::new(0.5, 0.5, 1.0, 1.0)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn has_positive_size(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    /// True when the box lies inside the unit frame, allowing `eps` of slack.
    pub fn is_inside_frame(&self, eps: f64) -> bool {
        self.x0() >= -eps && self.x1() <= 1.0 + eps && self.y0() >= -eps && self.y1() <= 1.0 + eps
    }

    /// Shrink and shift the box so it lies inside the unit frame. Used by
    /// rendering; decoding never clamps.
    pub fn clamp_to_frame(&self) -> BBox {
        let w = self.w.clamp(0.0, 1.0);
        let h = self.h.clamp(0.0, 1.0);
        let cx = self.cx.clamp(0.5 * w, 1.0 - 0.5 * w);
        let cy = self.cy.clamp(0.5 * h, 1.0 - 0.5 * h);
        BBox::new(cx, cy, w, h)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Integer pixel bounds `(x0, y0, x1, y1)` (exclusive upper end) for a
    /// frame of `width × height` pixels. Each side spans at least one pixel
    /// and the bounds are clipped to the frame.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (x0, x1) = pixel_span(self.x0(), self.x1(), width);
        let (y0, y1) = pixel_span(self.y0(), self.y1(), height);
        (x0, y0, x1, y1)
    }
}

fn pixel_span(lo: f64, hi: f64, size: usize) -> (usize, usize) {
    let s = size as f64;
    let a = (lo * s).round().clamp(0.0, s - 1.0) as usize;
    let b = ((hi * s).round().clamp(0.0, s) as usize).max(a + 1);
    (a, b.min(size))
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        [round6(self.cx), round6(self.cy), round6(self.w), round6(self.h)].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [cx, cy, w, h] = <[f64; 4]>::deserialize(deserializer)?;
        Ok(BBox::new(cx, cy, w, h))
    }
}

/// Scaling factors applied to the four regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sigmas {
    pub sx: f64,
    pub sy: f64,
    pub sw: f64,
    pub sh: f64,
}

impl Default for Sigmas {
    fn default() -> Self {
        Self {
            sx: 0.8,
            sy: 0.8,
            sw: 0.04,
            sh: 0.04,
        }
    }
}

impl Sigmas {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sx, self.sy, self.sw, self.sh];
        if all.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(CtpError::config(format!("sigmas must be strictly positive, got {all:?}")))
        }
    }
}

/// Regression targets for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetVec {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl TargetVec {
    pub const fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn is_finite(&self) -> bool {
        self.tx.is_finite() && self.ty.is_finite() && self.tw.is_finite() && self.th.is_finite()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

/// Decode regression targets against the query box of the starting frame.
pub fn decode_box(query: &BBox, t: &TargetVec, s: &Sigmas) -> Result<BBox> {
    if !t.is_finite() {
        return Err(CtpError::invalid(format!("non-finite targets {t:?}")));
    }
    Ok(BBox::new(
        query.cx + s.sx * t.tx,
        query.cy + s.sy * t.ty,
        query.w * (s.sw * t.tw).exp(),
        query.h * (s.sh * t.th).exp(),
    ))
}

/// Exact inverse of [`decode_box`].
pub fn encode_targets(query: &BBox, gt: &BBox, s: &Sigmas) -> Result<TargetVec> {
    if !gt.has_positive_size() || !query.has_positive_size() {
        return Err(CtpError::invalid(format!(
            "boxes must have positive size: query {query:?}, gt {gt:?}"
        )));
    }
    Ok(TargetVec::new(
        (gt.cx - query.cx) / s.sx,
        (gt.cy - query.cy) / s.sy,
        (gt.w / query.w).ln() / s.sw,
        (gt.h / query.h).ln() / s.sh,
    ))
}

/// Smooth-L1 with the transition at |x| = 1.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`].
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Per-component distances `(dx, dy, dw, dh)`: centers compared linearly,
/// sizes in log space, each divided by its scaling factor before Smooth-L1.
pub fn box_distance(gt: &BBox, pred: &BBox, s: &Sigmas) -> Result<[f64; 4]> {
    if !pred.has_positive_size() {
        return Err(CtpError::invalid(format!("predicted box has non-positive size: {pred:?}")));
    }
    if !gt.has_positive_size() {
        return Err(CtpError::invalid(format!("ground-truth box has non-positive size: {gt:?}")));
    }
    Ok([
        smooth_l1((gt.cx - pred.cx) / s.sx),
        smooth_l1((gt.cy - pred.cy) / s.sy),
        smooth_l1((gt.w / pred.w).ln() / s.sw),
        smooth_l1((gt.h / pred.h).ln() / s.sh),
    ])
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
