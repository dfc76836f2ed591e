//! Where training clips come from: a fixed list, procedural backgrounds,
//! or folders of video frames, plus dataset generation on a worker pool.
//!
//! Every random choice is keyed by `(seed, clip index, epoch)`, never by
//! the worker that happens to compute it, so results do not depend on the
//! pool size.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::compositor::{procedural_raw_clip, synthesize_training_clip, RawClip, SyntheticClip};
use crate::config::{CtpConfig, DataMode, SourceKind};
use crate::error::{CtpError, Result};
use crate::io::{load_dataset, write_manifest, write_synthetic_clip, ManifestRecord};
use crate::seeding::{self, tag};
use crate::trajsynth::TrajectoryConstraints;

pub const WORKERS_ENV: &str = "CTP_NUM_WORKERS";

/// Build a worker pool. The size is `requested` (default: available
/// cores), capped by `CTP_NUM_WORKERS` when set.
pub fn worker_pool(requested: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut n = requested.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let cap: usize = v
            .trim()
            .parse()
            .map_err(|_| CtpError::config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        n = n.min(cap.max(1));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build()
        .map_err(|e| CtpError::config(format!("cannot start worker pool: {e}")))
}

/// One video stored as a folder of frame images, in file-name order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameVideo {
    pub id: String,
    pub frames: Vec<PathBuf>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// List the sub-directories of `dir` that contain frame images.
pub fn scan_frame_folders(dir: &Path) -> Result<Vec<FrameVideo>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CtpError::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    let mut out = Vec::new();
    for d in subdirs {
        let rd = std::fs::read_dir(&d).map_err(|e| CtpError::io(&d, e))?;
        let mut frames: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
        frames.sort();
        if !frames.is_empty() {
            let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            out.push(FrameVideo { id, frames });
        }
    }
    if out.is_empty() {
        return Err(CtpError::data(format!("no frame folders found under {}", dir.display())));
    }
    Ok(out)
}

/// Load one frame scaled to cover `h × w` and center-cropped.
pub fn load_frame(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| CtpError::data(format!("cannot decode frame {}: {e}", path.display())))?
        .to_rgb8();
    let (iw, ih) = img.dimensions();
    if iw == 0 || ih == 0 {
        return Err(CtpError::data(format!("empty frame {}", path.display())));
    }
    let scale = (w as f64 / iw as f64).max(h as f64 / ih as f64);
    let sw = ((iw as f64 * scale).ceil() as u32).max(w as u32);
    let sh = ((ih as f64 * scale).ceil() as u32).max(h as u32);
    let resized = image::imageops::resize(&img, sw, sh, image::imageops::FilterType::Triangle);
    let x0 = (sw - w as u32) / 2;
    let y0 = (sh - h as u32) / 2;
    let crop = image::imageops::crop_imm(&resized, x0, y0, w as u32, h as u32).to_image();
    Ok(crop.into_raw())
}

/// Cut a `t`-frame window out of a frame-folder video. The temporal stride
/// and start come from `(seed, index, epoch)`; the stride shrinks when the
/// video is too short for it.
pub fn frame_clip(
    video: &FrameVideo,
    seed: u64,
    index: u64,
    epoch: u64,
    t: usize,
    h: usize,
    w: usize,
    frame_interval: [usize; 2],
) -> Result<RawClip> {
    let n = video.frames.len();
    if n < t {
        return Err(CtpError::data(format!("video {} has {n} frames, clips need {t}", video.id)));
    }
    let mut rng = seeding::rng_for(seed, &[tag::SOURCE, index, epoch]);
    let max_stride = ((n - 1) / (t - 1).max(1)).max(1);
    let stride = rng.gen_range(frame_interval[0]..=frame_interval[1]).min(max_stride).max(1);
    let span = (t - 1) * stride;
    let start = rng.gen_range(0..n - span);
    let mut frames = Vec::with_capacity(t * h * w * 3);
    for i in 0..t {
        frames.extend(load_frame(&video.frames[start + i * stride], h, w)?);
    }
    RawClip::new(t, h, w, frames, format!("{}@{start}", video.id))
}

#[derive(Debug, Clone)]
struct SynthSettings {
    seed: u64,
    t: usize,
    h: usize,
    w: usize,
    frame_interval: [usize; 2],
    k: usize,
    p_mask: f64,
    constraints: TrajectoryConstraints,
}

#[derive(Debug, Clone)]
enum Source {
    Fixed(Vec<SyntheticClip>),
    Procedural { num_clips: usize, synth: SynthSettings },
    Frames { videos: Vec<FrameVideo>, num_clips: usize, synth: SynthSettings },
}

/// Supplies the synthetic clip for `(index, epoch)`.
#[derive(Debug, Clone)]
pub struct ClipProvider {
    source: Source,
}

impl ClipProvider {
    /// A fixed clip list; the epoch is ignored.
    pub fn fixed(clips: Vec<SyntheticClip>) -> Self {
        Self {
            source: Source::Fixed(clips),
        }
    }

    pub fn from_config(cfg: &CtpConfig) -> Result<Self> {
        if cfg.data.mode == DataMode::Pregenerated {
            let manifest = cfg.data.manifest.as_ref().expect("validated config has a manifest");
            return Ok(Self::fixed(load_dataset(Path::new(manifest))?));
        }
        Self::synthesizing(cfg)
    }

    /// Ignore `data.mode` and synthesize from the configured source.
    pub fn synthesizing(cfg: &CtpConfig) -> Result<Self> {
        let e = &cfg.model.encoder;
        let synth = SynthSettings {
            seed: cfg.seed,
            t: e.input_t,
            h: e.input_h,
            w: e.input_w,
            frame_interval: cfg.data.frame_interval,
            k: cfg.data.k,
            p_mask: cfg.data.p_mask,
            constraints: cfg.data.trajectory.clone(),
        };
        let num_clips = cfg.data.num_clips;
        let source = match cfg.data.source {
            SourceKind::Procedural => Source::Procedural { num_clips, synth },
            SourceKind::Frames => {
                let dir = cfg.data.frames_dir.as_ref().expect("validated config has frames_dir");
                let videos = scan_frame_folders(Path::new(dir))?;
                Source::Frames { videos, num_clips, synth }
            }
        };
        Ok(Self { source })
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Fixed(c) => c.len(),
            Source::Procedural { num_clips, .. } | Source::Frames { num_clips, .. } => *num_clips,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clip dimensions `(T, H, W)` this provider produces.
    pub fn clip_dims(&self) -> Option<(usize, usize, usize)> {
        match &self.source {
            Source::Fixed(c) => c.first().map(|c| (c.t, c.h, c.w)),
            Source::Procedural { synth: s, .. } | Source::Frames { synth: s, .. } => Some((s.t, s.h, s.w)),
        }
    }

    pub fn raw_clip(&self, index: usize, epoch: usize) -> Result<RawClip> {
        match &self.source {
            Source::Fixed(_) => Err(CtpError::invalid("a fixed clip list has no raw clips")),
            Source::Procedural { synth: s, .. } => {
                procedural_raw_clip(s.seed, index as u64, s.t, s.h, s.w, s.frame_interval)
            }
            Source::Frames { videos, synth: s, .. } => frame_clip(
                &videos[index % videos.len()],
                s.seed,
                index as u64,
                epoch as u64,
                s.t,
                s.h,
                s.w,
                s.frame_interval,
            ),
        }
    }

    pub fn clip(&self, index: usize, epoch: usize) -> Result<SyntheticClip> {
        if index >= self.len() {
            return Err(CtpError::invalid(format!("clip index {index} out of range ({} clips)", self.len())));
        }
        match &self.source {
            Source::Fixed(c) => Ok(c[index].clone()),
            Source::Procedural { synth: s, .. } | Source::Frames { synth: s, .. } => {
                let raw = self.raw_clip(index, epoch)?;
                let seed = seeding::derive(s.seed, &[tag::SYNTH, index as u64, epoch as u64]);
                synthesize_training_clip(seed, &raw, s.k, &s.constraints, s.p_mask)
            }
        }
    }

    /// Identifier used in logs and diagnostic dumps.
    pub fn clip_id(&self, index: usize, epoch: usize) -> String {
        match &self.source {
            Source::Fixed(c) => format!("{index}:{}", c[index].source_id),
            _ => format!("{index}@epoch{epoch}"),
        }
    }
}

pub fn clip_name(index: usize) -> String {
    format!("clip-{index:06}")
}

/// Synthesize `data.num_clips` clips (epoch 0) into `out_dir` with a
/// manifest. Output bytes depend only on the config.
pub fn generate_dataset(cfg: &CtpConfig, out_dir: &Path, pool: &rayon::ThreadPool) -> Result<Vec<ManifestRecord>> {
    let provider = ClipProvider::synthesizing(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CtpError::io(out_dir, e))?;
    let records: Result<Vec<ManifestRecord>> = pool.install(|| {
        (0..provider.len())
            .into_par_iter()
            .map(|i| {
                let clip = provider.clip(i, 0)?;
                write_synthetic_clip(out_dir, &clip_name(i), &clip)
            })
            .collect()
    });
    let records = records?;
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
