//! Pseudo-trajectory sampling.
//!
//! A trajectory is built in three steps: an initial box, a handful of key
//! frames whose boxes respect ΔT-scaled speed and scale bounds relative to
//! the previous key frame, and linear interpolation in between. Speed is
//! bounded per axis. Because linear interpolation of sizes bounds the
//! per-frame difference rather than the ratio, every interpolated trajectory
//! is re-validated and resampled on violation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::geometry::BBox;

const KEYFRAME_REJECTIONS: usize = 100;
const TRAJECTORY_RETRIES: usize = 64;
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConstraints {
    /// Max per-axis center displacement between consecutive frames.
    pub max_speed: f64,
    /// Per-frame bound on |log size ratio|.
    pub scale_rate: f64,
    pub size_range: [f64; 2],
    pub aspect_range: [f64; 2],
    pub keyframe_count_range: [usize; 2],
}

impl Default for TrajectoryConstraints {
    fn default() -> Self {
        Self {
            max_speed: 3.0 / 112.0,
            scale_rate: 0.025,
            size_range: [16.0 / 112.0, 64.0 / 112.0],
            aspect_range: [0.5, 2.0],
            keyframe_count_range: [3, 5],
        }
    }
}

impl TrajectoryConstraints {
    pub fn validate(&self) -> Result<()> {
        let [smin, smax] = self.size_range;
        let [amin, amax] = self.aspect_range;
        let [kmin, kmax] = self.keyframe_count_range;
        if !(self.max_speed > 0.0) {
            return Err(CtpError::config("max_speed must be positive"));
        }
        if !(self.scale_rate >= 0.0) {
            return Err(CtpError::config("scale_rate must be non-negative"));
        }
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return Err(CtpError::config(format!(
                "size_range must lie within (0, 1] and be ordered, got {:?}",
                self.size_range
            )));
        }
        if !(amin > 0.0 && amin <= amax) {
            return Err(CtpError::config(format!(
                "aspect_range must be positive and ordered, got {:?}",
                self.aspect_range
            )));
        }
        if kmin < 2 || kmin > kmax {
            return Err(CtpError::config(format!(
                "keyframe_count_range must satisfy 2 <= min <= max, got {:?}",
                self.keyframe_count_range
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "T")]
    pub len: usize,
    #[serde(rename = "keyframes")]
    pub keyframe_indices: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub visible: Vec<bool>,
}

/// A single broken invariant found by [`Trajectory::violations`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Length,
    FirstFrameHidden,
    Keyframes,
    Speed { frame: usize },
    Scale { frame: usize },
    OutOfFrame { frame: usize },
}

impl Trajectory {
    pub fn query(&self) -> BBox {
        self.boxes[0]
    }

    /// All invariant violations against `c`. Empty means valid.
    pub fn violations(&self, c: &TrajectoryConstraints) -> Vec<Violation> {
        let mut out = Vec::new();
        let t = self.len;
        if self.boxes.len() != t || self.visible.len() != t || t < 2 {
            out.push(Violation::Length);
            return out;
        }
        if !self.visible[0] {
            out.push(Violation::FirstFrameHidden);
        }
        let kf = &self.keyframe_indices;
        if kf.first() != Some(&0) || kf.last() != Some(&(t - 1)) || kf.windows(2).any(|w| w[0] >= w[1]) {
            out.push(Violation::Keyframes);
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.has_positive_size() || !b.is_inside_frame(EPS) {
                out.push(Violation::OutOfFrame { frame: i });
            }
        }
        for (i, pair) in self.boxes.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            if (b.cx - a.cx).abs() > c.max_speed + EPS || (b.cy - a.cy).abs() > c.max_speed + EPS {
                out.push(Violation::Speed { frame: i + 1 });
            }
            let lim = c.scale_rate + EPS;
            if (b.w / a.w).ln().abs() > lim || (b.h / a.h).ln().abs() > lim {
                out.push(Violation::Scale { frame: i + 1 });
            }
        }
        out
    }

    pub fn is_valid(&self, c: &TrajectoryConstraints) -> bool {
        self.violations(c).is_empty()
    }
}

pub fn sample_initial_box<R: Rng + ?Sized>(rng: &mut R, c: &TrajectoryConstraints) -> Result<BBox> {
    c.validate()?;
    let [smin, smax] = c.size_range;
    let [amin, amax] = c.aspect_range;
    let s = uniform(rng, smin, smax);
    let a = uniform(rng, amin, amax);
    let w = (s * a.sqrt()).clamp(smin, smax.min(1.0));
    let h = (s / a.sqrt()).clamp(smin, smax.min(1.0));
    let cx = uniform(rng, 0.5 * w, 1.0 - 0.5 * w);
    let cy = uniform(rng, 0.5 * h, 1.0 - 0.5 * h);
    Ok(BBox::new(cx, cy, w, h))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Key frame indices and their boxes. Indices always include `0` and
/// `len - 1`; the box at index 0 is `initial`.
pub fn sample_keyframe_boxes<R: Rng + ?Sized>(
    rng: &mut R,
    initial: BBox,
    len: usize,
    c: &TrajectoryConstraints,
) -> Result<Vec<(usize, BBox)>> {
    if len < 2 {
        return Err(CtpError::invalid(format!("trajectory length must be >= 2, got {len}")));
    }
    let [kmin, kmax] = c.keyframe_count_range;
    let wanted = rng.gen_range(kmin..=kmax).min(len);
    let interior: Vec<usize> = if wanted > 2 {
        let mut picked = rand::seq::index::sample(rng, len - 2, wanted - 2).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| i + 1).collect()
    } else {
        Vec::new()
    };
    let mut indices = Vec::with_capacity(wanted);
    indices.push(0);
    indices.extend(interior);
    indices.push(len - 1);

    let mut out = Vec::with_capacity(indices.len());
    out.push((0, initial));
    for pair in indices.windows(2) {
        let prev = out.last().expect("non-empty").1;
        let gap = (pair[1] - pair[0]) as f64;
        out.push((pair[1], next_keyframe_box(rng, &prev, gap, c)));
    }
    Ok(out)
}

fn next_keyframe_box<R: Rng + ?Sized>(rng: &mut R, prev: &BBox, gap: f64, c: &TrajectoryConstraints) -> BBox {
    let reach = c.max_speed * gap;
    let log_reach = c.scale_rate * gap;
    let draw = |rng: &mut R| {
        let w = prev.w * uniform(rng, -log_reach, log_reach).exp();
        let h = prev.h * uniform(rng, -log_reach, log_reach).exp();
        let cx = prev.cx + uniform(rng, -reach, reach);
        let cy = prev.cy + uniform(rng, -reach, reach);
        BBox::new(cx, cy, w, h)
    };
    for _ in 0..KEYFRAME_REJECTIONS {
        let b = draw(rng);
        if b.is_inside_frame(0.0) {
            return b;
        }
    }
    // Fallback: keep the sampled size when it fits, then pull the center
    // back inside. The trajectory-level validation still applies.
    let b = draw(rng);
    let w = if b.w <= 1.0 { b.w } else { prev.w };
    let h = if b.h <= 1.0 { b.h } else { prev.h };
    BBox::new(
        b.cx.clamp(0.5 * w, 1.0 - 0.5 * w),
        b.cy.clamp(0.5 * h, 1.0 - 0.5 * h),
        w,
        h,
    )
}

/// Linear interpolation of all four box components between key frames.
pub fn interpolate_trajectory(keyframes: &[(usize, BBox)], len: usize) -> Result<Vec<BBox>> {
    if keyframes.is_empty() || keyframes[0].0 != 0 || keyframes.last().map(|k| k.0) != Some(len.wrapping_sub(1)) {
        return Err(CtpError::invalid("key frames must start at 0 and end at the last frame"));
    }
    if keyframes.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(CtpError::invalid("key frame indices must be strictly increasing without duplicates"));
    }
    let mut boxes = Vec::with_capacity(len);
    boxes.push(keyframes[0].1);
    for seg in keyframes.windows(2) {
        let (a, ba) = seg[0];
        let (b, bb) = seg[1];
        let span = (b - a) as f64;
        for i in a + 1..b {
            let f = (i - a) as f64 / span;
            boxes.push(BBox::new(
                ba.cx + f * (bb.cx - ba.cx),
                ba.cy + f * (bb.cy - ba.cy),
                ba.w + f * (bb.w - ba.w),
                ba.h + f * (bb.h - ba.h),
            ));
        }
        boxes.push(bb);
    }
    Ok(boxes)
}

/// Sample a full trajectory of `len` frames, all visible.
pub fn sample_trajectory<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    c: &TrajectoryConstraints,
) -> Result<Trajectory> {
    if len < 2 {
        return Err(CtpError::invalid(format!("trajectory length must be >= 2, got {len}")));
    }
    c.validate()?;
    for _ in 0..TRAJECTORY_RETRIES {
        let initial = sample_initial_box(rng, c)?;
        let keyframes = sample_keyframe_boxes(rng, initial, len, c)?;
        let boxes = interpolate_trajectory(&keyframes, len)?;
        let traj = Trajectory {
            len,
            keyframe_indices: keyframes.iter().map(|k| k.0).collect(),
            boxes,
            visible: vec![true; len],
        };
        if traj.is_valid(c) {
            return Ok(traj);
        }
    }
    Err(CtpError::data(format!(
        "could not sample a valid trajectory in {TRAJECTORY_RETRIES} attempts"
    )))
}
