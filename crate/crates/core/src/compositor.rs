//! Synthetic training clip construction.
//!
//! For each of `K` trajectories a patch is cut from one frame of the raw
//! clip at that trajectory's box, then resized and pasted along the whole
//! trajectory. Masked frames (the masked region model) skip the paste but
//! keep their ground-truth box. Later trajectories overdraw earlier ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::geometry::BBox;
use crate::seeding::{self, tag};
use crate::trajsynth::{sample_trajectory, Trajectory, TrajectoryConstraints};

/// Unlabelled source clip, `T × H × W × 3` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<u8>,
    pub source_id: String,
}

impl RawClip {
    pub fn new(t: usize, h: usize, w: usize, frames: Vec<u8>, source_id: impl Into<String>) -> Result<Self> {
        if t < 2 || h < 32 || w < 32 {
            return Err(CtpError::data(format!("raw clip must be at least 2x32x32, got {t}x{h}x{w}")));
        }
        if frames.len() != t * h * w * 3 {
            return Err(CtpError::data(format!(
                "raw clip buffer has {} bytes, expected {}",
                frames.len(),
                t * h * w * 3
            )));
        }
        Ok(Self {
            t,
            h,
            w,
            frames,
            source_id: source_id.into(),
        })
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.h * self.w * 3;
        &self.frames[i * n..(i + 1) * n]
    }
}

/// An RGB image patch, `h × w × 3` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub w: usize,
    pub h: usize,
    pub pixels: Vec<u8>,
}

/// Where a patch was copied from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSource {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<u8>,
    pub trajectories: Vec<Trajectory>,
    pub patch_sources: Vec<PatchSource>,
    pub seed: u64,
    pub source_id: String,
}

impl SyntheticClip {
    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.h, self.w, 3]
    }

    pub fn queries(&self) -> Vec<BBox> {
        self.trajectories.iter().map(|t| t.query()).collect()
    }
}

/// Bilinear resize with half-pixel-centered sampling and round-half-up.
pub fn resize_bilinear(src: &Patch, out_w: usize, out_h: usize) -> Patch {
    let mut pixels = vec![0u8; out_w * out_h * 3];
    let sx = src.w as f64 / out_w as f64;
    let sy = src.h as f64 / out_h as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.h - 1);
        let ly = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.w - 1);
            let lx = fx - x0 as f64;
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src.pixels[(yy * src.w + xx) * 3 + c] as f64;
                let v = (1.0 - ly) * ((1.0 - lx) * p(y0, x0) + lx * p(y0, x1)) + ly * ((1.0 - lx) * p(y1, x0) + lx * p(y1, x1));
                pixels[(y * out_w + x) * 3 + c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Patch {
        w: out_w,
        h: out_h,
        pixels,
    }
}

fn crop(frame: &[u8], frame_w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Patch {
    let (w, h) = (x1 - x0, y1 - y0);
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in y0..y1 {
        let row = (y * frame_w + x0) * 3;
        pixels.extend_from_slice(&frame[row..row + w * 3]);
    }
    Patch { w, h, pixels }
}

/// Copy the patch under one randomly chosen box of `traj`.
pub fn crop_patch<R: Rng + ?Sized>(raw: &RawClip, traj: &Trajectory, rng: &mut R) -> Result<(Patch, PatchSource)> {
    if traj.boxes.len() != raw.t {
        return Err(CtpError::invalid(format!(
            "trajectory has {} frames, clip has {}",
            traj.boxes.len(),
            raw.t
        )));
    }
    for _ in 0..raw.t.max(1) * 4 {
        let j = rng.gen_range(0..raw.t);
        let b = traj.boxes[j];
        let (x0, y0, x1, y1) = b.pixel_bounds(raw.w, raw.h);
        if x1 > x0 && y1 > y0 {
            return Ok((crop(raw.frame(j), raw.w, x0, y0, x1, y1), PatchSource { frame: j, bbox: b }));
        }
    }
    Err(CtpError::data("every candidate crop was degenerate"))
}

/// Frame 0 is always visible; later frames are hidden with probability `p_mask`.
pub fn sample_visibility<R: Rng + ?Sized>(rng: &mut R, len: usize, p_mask: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&p_mask) {
        return Err(CtpError::config(format!("p_mask must lie in [0, 1), got {p_mask}")));
    }
    Ok((0..len).map(|i| i == 0 || rng.gen::<f64>() >= p_mask).collect())
}

/// Paste each patch along its trajectory on the frames where it is visible.
pub fn composite_clip(
    raw: &RawClip,
    trajs: &[Trajectory],
    patches: &[Patch],
    visibility: &[Vec<bool>],
    patch_sources: &[PatchSource],
    seed: u64,
) -> Result<SyntheticClip> {
    let k = trajs.len();
    if patches.len() != k || visibility.len() != k || patch_sources.len() != k {
        return Err(CtpError::invalid(format!(
            "misaligned inputs: {k} trajectories, {} patches, {} visibility lists, {} sources",
            patches.len(),
            visibility.len(),
            patch_sources.len()
        )));
    }
    let mut frames = raw.frames.clone();
    let frame_len = raw.h * raw.w * 3;
    let mut stored = Vec::with_capacity(k);
    for ((traj, patch), vis) in trajs.iter().zip(patches).zip(visibility) {
        if traj.boxes.len() != raw.t || vis.len() != raw.t {
            return Err(CtpError::invalid("trajectory or visibility length differs from clip length"));
        }
        for (i, b) in traj.boxes.iter().enumerate() {
            if !vis[i] {
                continue;
            }
            let (x0, y0, x1, y1) = b.pixel_bounds(raw.w, raw.h);
            let scaled = resize_bilinear(patch, x1 - x0, y1 - y0);
            let frame = &mut frames[i * frame_len..(i + 1) * frame_len];
            for (row, y) in (y0..y1).enumerate() {
                let dst = (y * raw.w + x0) * 3;
                let src = row * scaled.w * 3;
                frame[dst..dst + scaled.w * 3].copy_from_slice(&scaled.pixels[src..src + scaled.w * 3]);
            }
        }
        let mut t = traj.clone();
        t.visible = vis.clone();
        stored.push(t);
    }
    Ok(SyntheticClip {
        t: raw.t,
        h: raw.h,
        w: raw.w,
        frames,
        trajectories: stored,
        patch_sources: patch_sources.to_vec(),
        seed,
        source_id: raw.source_id.clone(),
    })
}

/// Build one training clip with `k` independent patch trajectories. The
/// result depends only on `(seed, raw.source_id, k)` and the parameters.
pub fn synthesize_training_clip(
    seed: u64,
    raw: &RawClip,
    k: usize,
    constraints: &TrajectoryConstraints,
    p_mask: f64,
) -> Result<SyntheticClip> {
    if k == 0 {
        return Err(CtpError::config("at least one trajectory per clip is required"));
    }
    let source_key = seeding::hash_str(&raw.source_id);
    let mut trajs = Vec::with_capacity(k);
    let mut patches = Vec::with_capacity(k);
    let mut vis = Vec::with_capacity(k);
    let mut sources = Vec::with_capacity(k);
    for j in 0..k {
        let mut rng = seeding::rng_for(seed, &[tag::TRAJECTORY, source_key, j as u64]);
        let traj = sample_trajectory(&mut rng, raw.t, constraints)?;
        let (patch, src) = crop_patch(raw, &traj, &mut rng)?;
        vis.push(sample_visibility(&mut rng, raw.t, p_mask)?);
        trajs.push(traj);
        patches.push(patch);
        sources.push(src);
    }
    composite_clip(raw, &trajs, &patches, &vis, &sources, seed)
}

// ---------------------------------------------------------------------------
// Procedural backgrounds

/// Random texture: two octaves of value noise plus a color gradient, covered
/// by a layer of opaque dead-leaves shapes (disks and rectangles).
#[derive(Debug, Clone)]
pub struct Texture {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<f32>,
}

impl Texture {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize) -> Self {
        let mut rgb = vec![0f32; w * h * 3];
        let base: [f32; 3] = [rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0)];
        let grad: [[f32; 2]; 3] = std::array::from_fn(|_| [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0)]);
        let octaves = [(rng.gen_range(10.0..24.0), rng.gen_range(40.0..80.0)), (rng.gen_range(3.0..7.0), rng.gen_range(15.0..40.0))];
        for (cell, amp) in octaves {
            let gw = (w as f64 / cell).ceil() as usize + 2;
            let gh = (h as f64 / cell).ceil() as usize + 2;
            let lattice: Vec<f32> = (0..gw * gh * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            for y in 0..h {
                let fy = y as f64 / cell;
                let (gy, ly) = (fy.floor() as usize, smoothstep(fy.fract()) as f32);
                for x in 0..w {
                    let fx = x as f64 / cell;
                    let (gx, lx) = (fx.floor() as usize, smoothstep(fx.fract()) as f32);
                    for c in 0..3 {
                        let l = |yy: usize, xx: usize| lattice[(yy * gw + xx) * 3 + c];
                        let v = (1.0 - ly) * ((1.0 - lx) * l(gy, gx) + lx * l(gy, gx + 1))
                            + ly * ((1.0 - lx) * l(gy + 1, gx) + lx * l(gy + 1, gx + 1));
                        rgb[(y * w + x) * 3 + c] += v * amp as f32;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 / w as f32 - 0.5, y as f32 / h as f32 - 0.5);
                for c in 0..3 {
                    rgb[(y * w + x) * 3 + c] += base[c] + grad[c][0] * u + grad[c][1] * v;
                }
            }
        }
        let leaves = (w * h) / 90 + rng.gen_range(0..8);
        for _ in 0..leaves {
            let r = rng.gen_range(2.0f64..(w.min(h) as f64 / 7.0).max(3.0));
            let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0f32..255.0));
            let disk = rng.gen_bool(0.5);
            let aspect = rng.gen_range(0.5f64..2.0);
            let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
            let (y0, y1) = ((cy - ry).floor().max(0.0) as usize, ((cy + ry).ceil() as usize).min(h));
            let (x0, x1) = ((cx - rx).floor().max(0.0) as usize, ((cx + rx).ceil() as usize).min(w));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    if !disk || dx * dx + dy * dy <= 1.0 {
                        let o = (y * w + x) * 3;
                        for c in 0..3 {
                            rgb[o + c] = 0.25 * rgb[o + c] + 0.75 * color[c];
                        }
                    }
                }
            }
        }
        Self { w, h, rgb }
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the edge.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (lx, ly) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        std::array::from_fn(|c| {
            let p = |yy: usize, xx: usize| self.rgb[(yy * self.w + xx) * 3 + c];
            (1.0 - ly) * ((1.0 - lx) * p(y0, x0) + lx * p(y0, x1)) + ly * ((1.0 - lx) * p(y1, x0) + lx * p(y1, x1))
        })
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

pub fn to_u8(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// A panning view over a random texture, sampled with a temporal stride in
/// `frame_interval` (source frames per output frame).
pub fn procedural_raw_clip(
    seed: u64,
    source_index: u64,
    t: usize,
    h: usize,
    w: usize,
    frame_interval: [usize; 2],
) -> Result<RawClip> {
    let mut rng = seeding::rng_for(seed, &[tag::SOURCE, source_index]);
    let stride = rng.gen_range(frame_interval[0].max(1)..=frame_interval[1].max(frame_interval[0]).max(1)) as f64;
    let margin = 24usize;
    let tex = Texture::random(&mut rng, w + 2 * margin, h + 2 * margin);
    let max_v = (margin as f64 - 2.0) / (stride * t as f64);
    let vx = rng.gen_range(-0.5f64..0.5).clamp(-max_v, max_v);
    let vy = rng.gen_range(-0.5f64..0.5).clamp(-max_v, max_v);
    let mut frames = Vec::with_capacity(t * h * w * 3);
    for i in 0..t {
        let ox = margin as f64 + vx * stride * i as f64;
        let oy = margin as f64 + vy * stride * i as f64;
        for y in 0..h {
            for x in 0..w {
                let px = tex.sample(ox + x as f64, oy + y as f64);
                frames.extend(px.iter().map(|v| to_u8(*v)));
            }
        }
    }
    RawClip::new(t, h, w, frames, format!("procedural-{seed}-{source_index}"))
}
