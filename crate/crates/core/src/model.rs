//! The encoder contract, a small residual 3D CNN implementing it, and the
//! patch-tracking prediction head.
//!
//! The head collapses the time axis of the feature volume with a learned
//! convolution whose temporal kernel spans the whole volume, crops each
//! query box from the resulting map with bilinear region pooling, and maps
//! the pooled features through a two-layer MLP to `T × 4` regression
//! targets. Targets are decoded against the query box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::geometry::{decode_box, BBox, Sigmas, TargetVec};
use crate::nn::{relu_backward_inplace, relu_inplace, Conv3d, Linear, Param, Real, Volume};

/// Encoder output, `T′ × H′ × W′ × C`.
pub type FeatureVolume<R> = Volume<R>;

/// Kernel factorization used by every convolution unit of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Full `3×3×3` kernels.
    #[default]
    Full3d,
    /// A `1×3×3` spatial kernel followed by a `3×1×1` temporal kernel.
    R2plus1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub input_t: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Total spatial downsampling, a power of two.
    pub spatial_stride: usize,
    /// Total temporal downsampling, a power of two.
    pub temporal_stride: usize,
    /// Output channels of each stage; the last entry is the feature width.
    pub widths: Vec<usize>,
    pub kind: ConvKind,
    /// Add a stride-1 residual convolution to every stage.
    pub residual: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            input_t: 8,
            input_h: 64,
            input_w: 64,
            spatial_stride: 8,
            temporal_stride: 2,
            widths: vec![16, 32, 64, 128],
            kind: ConvKind::Full3d,
            residual: true,
        }
    }
}

impl EncoderSpec {
    pub fn channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [
            self.input_t / self.temporal_stride,
            self.input_h / self.spatial_stride,
            self.input_w / self.spatial_stride,
            self.channels(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.widths.iter().any(|w| *w == 0) {
            return Err(CtpError::config("encoder widths must be non-empty and positive"));
        }
        for (name, s) in [("spatial_stride", self.spatial_stride), ("temporal_stride", self.temporal_stride)] {
            if !s.is_power_of_two() || s.trailing_zeros() as usize > n {
                return Err(CtpError::config(format!(
                    "{name} must be a power of two no larger than 2^{n}, got {s}"
                )));
            }
        }
        if self.input_t % self.temporal_stride != 0
            || self.input_h % self.spatial_stride != 0
            || self.input_w % self.spatial_stride != 0
        {
            return Err(CtpError::config(format!(
                "input {}x{}x{} not divisible by strides ({}, {})",
                self.input_t, self.input_h, self.input_w, self.temporal_stride, self.spatial_stride
            )));
        }
        Ok(())
    }

    /// Per-stage `(temporal, spatial)` strides. Spatial halvings go to the
    /// earliest stages; temporal halvings start at the second stage.
    pub fn stage_strides(&self) -> Vec<(usize, usize)> {
        let n = self.widths.len();
        let s_count = self.spatial_stride.trailing_zeros() as usize;
        let t_count = self.temporal_stride.trailing_zeros() as usize;
        let t_order: Vec<usize> = (1..n).chain(std::iter::once(0)).collect();
        (0..n)
            .map(|i| {
                let t = if t_order.iter().take(t_count).any(|s| *s == i) { 2 } else { 1 };
                let s = if i < s_count { 2 } else { 1 };
                (t, s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSpec {
    pub pool_size: usize,
    pub hidden: usize,
    pub out_t: usize,
    pub squeeze_enabled: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            pool_size: 5,
            hidden: 512,
            out_t: 8,
            squeeze_enabled: true,
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.hidden == 0 || self.out_t == 0 {
            return Err(CtpError::config("head pool_size, hidden and out_t must be positive"));
        }
        Ok(())
    }
}

/// Per-channel pixel normalization applied before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.432, 0.395, 0.376],
            std: [0.228, 0.221, 0.217],
        }
    }
}

impl Normalization {
    /// `u8` frames `T × H × W × 3` to a normalized volume.
    pub fn apply<R: Real>(&self, dims: [usize; 4], pixels: &[u8]) -> Volume<R> {
        assert_eq!(dims[3], 3, "normalization expects RGB");
        let scale = [
            1.0 / (255.0 * self.std[0]),
            1.0 / (255.0 * self.std[1]),
            1.0 / (255.0 * self.std[2]),
        ];
        let shift = [
            self.mean[0] / self.std[0],
            self.mean[1] / self.std[1],
            self.mean[2] / self.std[2],
        ];
        let data = pixels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let c = i % 3;
                R::from_f64(*p as f64 * scale[c] - shift[c])
            })
            .collect();
        Volume::from_vec(dims, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub normalization: Normalization,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.head.out_t != self.encoder.input_t {
            return Err(CtpError::config(format!(
                "head.out_t ({}) must equal encoder.input_t ({})",
                self.head.out_t, self.encoder.input_t
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Debug, Clone, PartialEq)]
enum ConvUnit<R> {
    Full(Conv3d<R>),
    Factorized { spatial: Conv3d<R>, temporal: Conv3d<R> },
}

#[derive(Debug, Clone)]
struct UnitTrace<R> {
    input: Volume<R>,
    /// Post-ReLU output of the spatial half of a factorized unit.
    mid: Option<Volume<R>>,
}

impl<R: Real> ConvUnit<R> {
    fn new<G: Rng + ?Sized>(
        name: &str,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        stride: (usize, usize),
        gain: f64,
        rng: &mut G,
    ) -> Self {
        let (st, ss) = stride;
        match kind {
            ConvKind::Full3d => ConvUnit::Full(Conv3d::new(name, c_in, c_out, [3, 3, 3], [st, ss, ss], gain, rng)),
            ConvKind::R2plus1d => {
                // intermediate width keeps the parameter count of the full kernel
                let mid = ((27 * c_in * c_out) / (9 * c_in + 3 * c_out)).max(1);
                ConvUnit::Factorized {
                    spatial: Conv3d::new(&format!("{name}.spatial"), c_in, mid, [1, 3, 3], [1, ss, ss], 1.0, rng),
                    temporal: Conv3d::new(&format!("{name}.temporal"), mid, c_out, [3, 1, 1], [st, 1, 1], gain, rng),
                }
            }
        }
    }

    fn forward(&self, x: &Volume<R>, keep: bool) -> (Volume<R>, Option<UnitTrace<R>>) {
        match self {
            ConvUnit::Full(c) => {
                let y = c.forward(x);
                let trace = keep.then(|| UnitTrace { input: x.clone(), mid: None });
                (y, trace)
            }
            ConvUnit::Factorized { spatial, temporal } => {
                let mut m = spatial.forward(x);
                relu_inplace(&mut m.data);
                let y = temporal.forward(&m);
                let trace = keep.then(|| UnitTrace {
                    input: x.clone(),
                    mid: Some(m),
                });
                (y, trace)
            }
        }
    }

    fn backward(&mut self, trace: &UnitTrace<R>, grad: &Volume<R>, need_input: bool) -> Option<Volume<R>> {
        match self {
            ConvUnit::Full(c) => c.backward(&trace.input, grad, need_input),
            ConvUnit::Factorized { spatial, temporal } => {
                let mid = trace.mid.as_ref().expect("factorized trace keeps its middle activation");
                let mut dm = temporal.backward(mid, grad, true).expect("requested");
                relu_backward_inplace(&mid.data, &mut dm.data);
                spatial.backward(&trace.input, &dm, need_input)
            }
        }
    }

    fn params(&self) -> Vec<&Param<R>> {
        match self {
            ConvUnit::Full(c) => c.params().to_vec(),
            ConvUnit::Factorized { spatial, temporal } => {
                spatial.params().into_iter().chain(temporal.params()).collect()
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        match self {
            ConvUnit::Full(c) => c.params_mut().into_iter().collect(),
            ConvUnit::Factorized { spatial, temporal } => {
                spatial.params_mut().into_iter().chain(temporal.params_mut()).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage<R> {
    down: ConvUnit<R>,
    body: Option<ConvUnit<R>>,
}

#[derive(Debug, Clone)]
struct StageTrace<R> {
    down: UnitTrace<R>,
    hidden: Volume<R>,
    body: Option<UnitTrace<R>>,
    out: Volume<R>,
}

/// Residual 3D CNN: each stage is a strided convolution followed, when
/// enabled, by a stride-1 residual convolution `relu(h + conv(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<R> {
    spec: EncoderSpec,
    stages: Vec<Stage<R>>,
}

/// Intermediate activations kept by [`Encoder::forward_train`].
#[derive(Debug, Clone)]
pub struct EncoderTrace<R> {
    stages: Vec<StageTrace<R>>,
}

impl<R: Real> Encoder<R> {
    pub fn new<G: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut G) -> Result<Self> {
        spec.validate()?;
        let mut c_in = 3;
        let mut stages = Vec::new();
        for (i, (&w, stride)) in spec.widths.iter().zip(spec.stage_strides()).enumerate() {
            let down = ConvUnit::new(&format!("encoder.stage{i}.down"), spec.kind, c_in, w, stride, 1.0, rng);
            // residual branch starts small so the identity path dominates at init
            let body = spec
                .residual
                .then(|| ConvUnit::new(&format!("encoder.stage{i}.body"), spec.kind, w, w, (1, 1), 0.5, rng));
            stages.push(Stage { down, body });
            c_in = w;
        }
        Ok(Self { spec: spec.clone(), stages })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn check_input(&self, x: &Volume<R>) -> Result<()> {
        let s = &self.spec;
        if x.dims != [s.input_t, s.input_h, s.input_w, 3] {
            return Err(CtpError::invalid(format!(
                "clip shape {:?} does not match encoder input {:?}",
                x.dims,
                [s.input_t, s.input_h, s.input_w, 3]
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Volume<R>, keep: bool) -> (Volume<R>, Vec<StageTrace<R>>) {
        let mut traces = Vec::new();
        let mut cur = x.clone();
        for stage in &self.stages {
            let (mut h, down_trace) = stage.down.forward(&cur, keep);
            relu_inplace(&mut h.data);
            let (out, body_trace) = match &stage.body {
                Some(body) => {
                    let (r, t) = body.forward(&h, keep);
                    let mut o = h.clone();
                    o.data.iter_mut().zip(&r.data).for_each(|(a, b)| *a += *b);
                    relu_inplace(&mut o.data);
                    (o, t)
                }
                None => (h.clone(), None),
            };
            if let Some(down) = down_trace {
                traces.push(StageTrace {
                    down,
                    hidden: h,
                    body: body_trace,
                    out: out.clone(),
                });
            }
            cur = out;
        }
        (cur, traces)
    }

    /// Inference-mode encoding.
    pub fn encode(&self, x: &Volume<R>) -> Result<FeatureVolume<R>> {
        self.check_input(x)?;
        Ok(self.run(x, false).0)
    }

    pub fn forward_train(&self, x: &Volume<R>) -> Result<(FeatureVolume<R>, EncoderTrace<R>)> {
        self.check_input(x)?;
        let (v, stages) = self.run(x, true);
        Ok((v, EncoderTrace { stages }))
    }

    /// Backpropagate a feature-volume gradient into the encoder parameters.
    pub fn backward(&mut self, trace: &EncoderTrace<R>, grad: Volume<R>) {
        let mut g = grad;
        for (i, (stage, st)) in self.stages.iter_mut().zip(&trace.stages).enumerate().rev() {
            relu_backward_inplace(&st.out.data, &mut g.data);
            let mut dh = g.clone();
            if let (Some(body), Some(bt)) = (stage.body.as_mut(), st.body.as_ref()) {
                let db = body.backward(bt, &g, true).expect("requested");
                dh.data.iter_mut().zip(&db.data).for_each(|(a, b)| *a += *b);
            }
            relu_backward_inplace(&st.hidden.data, &mut dh.data);
            // the pixel gradient is never needed
            if let Some(dx) = stage.down.backward(&st.down, &dh, i > 0) {
                g = dx;
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<R>> {
        self.stages
            .iter()
            .flat_map(|s| {
                let mut v = s.down.params();
                if let Some(b) = &s.body {
                    v.extend(b.params());
                }
                v
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        self.stages
            .iter_mut()
            .flat_map(|s| {
                let mut v = s.down.params_mut();
                if let Some(b) = &mut s.body {
                    v.extend(b.params_mut());
                }
                v
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Region pooling

/// Bilinear sampling plan for one box: for each output cell the feature
/// map positions it reads and their weights. The box is split into
/// `pool_size²` cells and each cell averages a fixed 2×2 grid of bilinear
/// samples at continuous coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPlan {
    pub pool_size: usize,
    pub cells: Vec<Vec<(usize, f64)>>,
}

pub const ROI_SAMPLES: usize = 2;

impl RoiPlan {
    pub fn new(b: &BBox, map_h: usize, map_w: usize, pool_size: usize) -> Self {
        let x0 = b.x0() * map_w as f64;
        let y0 = b.y0() * map_h as f64;
        let cw = b.w * map_w as f64 / pool_size as f64;
        let ch = b.h * map_h as f64 / pool_size as f64;
        let n = ROI_SAMPLES as f64;
        let weight = 1.0 / (n * n);
        let mut cells = Vec::with_capacity(pool_size * pool_size);
        for py in 0..pool_size {
            for px in 0..pool_size {
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(16);
                for sy in 0..ROI_SAMPLES {
                    // pixel-center convention: sample coordinate minus one half
                    let y = y0 + (py as f64 + (sy as f64 + 0.5) / n) * ch - 0.5;
                    for sx in 0..ROI_SAMPLES {
                        let x = x0 + (px as f64 + (sx as f64 + 0.5) / n) * cw - 0.5;
                        for (pos, w) in bilinear_taps(y, x, map_h, map_w) {
                            if w == 0.0 {
                                continue;
                            }
                            match taps.iter_mut().find(|t| t.0 == pos) {
                                Some(t) => t.1 += w * weight,
                                None => taps.push((pos, w * weight)),
                            }
                        }
                    }
                }
                cells.push(taps);
            }
        }
        Self { pool_size, cells }
    }

    /// `map` is `H × W × C` flattened; returns `pool² × C`.
    pub fn pool<R: Real>(&self, map: &[R], channels: usize) -> Vec<R> {
        let mut out = vec![R::zero(); self.cells.len() * channels];
        for (cell, taps) in self.cells.iter().enumerate() {
            let dst = &mut out[cell * channels..(cell + 1) * channels];
            for &(pos, w) in taps {
                let w = R::from_f64(w);
                let src = &map[pos * channels..(pos + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * *s;
                }
            }
        }
        out
    }

    pub fn backward<R: Real>(&self, grad_out: &[R], channels: usize, grad_map: &mut [R]) {
        for (cell, taps) in self.cells.iter().enumerate() {
            let src = &grad_out[cell * channels..(cell + 1) * channels];
            for &(pos, w) in taps {
                let w = R::from_f64(w);
                let dst = &mut grad_map[pos * channels..(pos + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * *s;
                }
            }
        }
    }
}

/// Four bilinear taps `(flat position, weight)` at continuous `(y, x)`,
/// with coordinates clamped to the map.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

/// Region-aligned pooling of a `1 × H × W × C` map inside `b`.
pub fn pool_region<R: Real>(map: &Volume<R>, b: &BBox, pool_size: usize) -> Volume<R> {
    assert_eq!(map.t(), 1, "pool_region expects a squeezed map");
    let plan = RoiPlan::new(b, map.h(), map.w(), pool_size);
    Volume::from_vec([1, pool_size, pool_size, map.c()], plan.pool(&map.data, map.c()))
}

// ---------------------------------------------------------------------------
// Head

/// Prediction head: temporal squeeze, region pooling and a two-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<R> {
    spec: HeadSpec,
    feat_t: usize,
    channels: usize,
    /// `(T′·C) × C` weight and `C` bias, or `None` when the squeeze is off.
    squeeze: Option<(Param<R>, Param<R>)>,
    fc1: Linear<R>,
    fc2: Linear<R>,
}

/// Activations kept by [`Head::forward_train`] for one clip.
#[derive(Debug, Clone)]
pub struct HeadTrace<R> {
    squeeze_input: Vec<R>,
    map: Volume<R>,
    plans: Vec<RoiPlan>,
    pooled: Vec<R>,
    hidden: Vec<R>,
}

impl<R: Real> Head<R> {
    pub fn new<G: Rng + ?Sized>(spec: &HeadSpec, feat_dims: [usize; 4], rng: &mut G) -> Result<Self> {
        spec.validate()?;
        let [t, _, _, c] = feat_dims;
        let squeeze = spec.squeeze_enabled.then(|| {
            let std = (1.0 / (t * c) as f64).sqrt();
            (
                Param::normal("head.squeeze.weight", vec![t, c, c], std, rng),
                Param::zeros("head.squeeze.bias", vec![c], false),
            )
        });
        let n_in = spec.pool_size * spec.pool_size * c;
        Ok(Self {
            spec: spec.clone(),
            feat_t: t,
            channels: c,
            squeeze,
            fc1: Linear::new("head.fc1", n_in, spec.hidden, (2.0 / n_in as f64).sqrt(), rng),
            fc2: Linear::zeros("head.fc2", spec.hidden, spec.out_t * 4),
        })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    /// Positions-major `(H′W′) × (T′·C)` layout of the feature volume.
    fn squeeze_rows(&self, v: &Volume<R>) -> Vec<R> {
        let [t, h, w, c] = v.dims;
        let mut rows = vec![R::zero(); h * w * t * c];
        for p in 0..h * w {
            for ti in 0..t {
                let src = (ti * h * w + p) * c;
                let dst = p * t * c + ti * c;
                rows[dst..dst + c].copy_from_slice(&v.data[src..src + c]);
            }
        }
        rows
    }

    /// Collapse `T′` to one map: a learned full-extent temporal convolution,
    /// or a temporal mean when the squeeze is disabled.
    pub fn temporal_squeeze(&self, v: &Volume<R>) -> Volume<R> {
        self.squeeze_with_rows(v).1
    }

    fn squeeze_with_rows(&self, v: &Volume<R>) -> (Vec<R>, Volume<R>) {
        let [t, h, w, c] = v.dims;
        assert_eq!((t, c), (self.feat_t, self.channels), "feature volume shape");
        match &self.squeeze {
            Some((weight, bias)) => {
                let rows = self.squeeze_rows(v);
                let mut out = Vec::with_capacity(h * w * c);
                for _ in 0..h * w {
                    out.extend_from_slice(&bias.value);
                }
                crate::nn::matmul(h * w, t * c, c, &rows, &weight.value, R::one(), &mut out);
                (rows, Volume::from_vec([1, h, w, c], out))
            }
            None => {
                let mut out = vec![R::zero(); h * w * c];
                let inv = R::from_f64(1.0 / t as f64);
                for ti in 0..t {
                    let slab = &v.data[ti * h * w * c..(ti + 1) * h * w * c];
                    out.iter_mut().zip(slab).for_each(|(o, s)| *o += *s * inv);
                }
                (Vec::new(), Volume::from_vec([1, h, w, c], out))
            }
        }
    }

    /// Squeezed map and per-query regression targets, `K × out_t × 4`.
    pub fn forward_train(&self, v: &Volume<R>, queries: &[BBox]) -> (Vec<R>, HeadTrace<R>) {
        let (squeeze_input, map) = self.squeeze_with_rows(v);
        let c = self.channels;
        let p = self.spec.pool_size;
        let plans: Vec<RoiPlan> = queries.iter().map(|q| RoiPlan::new(q, map.h(), map.w(), p)).collect();
        let mut pooled = Vec::with_capacity(queries.len() * p * p * c);
        for plan in &plans {
            pooled.extend(plan.pool(&map.data, c));
        }
        let k = queries.len();
        let mut hidden = self.fc1.forward(&pooled, k);
        relu_inplace(&mut hidden);
        let targets = self.fc2.forward(&hidden, k);
        (
            targets,
            HeadTrace {
                squeeze_input,
                map,
                plans,
                pooled,
                hidden,
            },
        )
    }

    /// Targets from already-pooled features (`K × pool²·C`).
    pub fn predict_targets(&self, pooled: &[R], k: usize) -> Vec<R> {
        let mut hidden = self.fc1.forward(pooled, k);
        relu_inplace(&mut hidden);
        self.fc2.forward(&hidden, k)
    }

    /// Backpropagate target gradients; returns the feature-volume gradient.
    pub fn backward(&mut self, trace: &HeadTrace<R>, grad_targets: &[R], feat_dims: [usize; 4]) -> Volume<R> {
        let k = trace.plans.len();
        let c = self.channels;
        let mut dh = self.fc2.backward(&trace.hidden, grad_targets, k);
        relu_backward_inplace(&trace.hidden, &mut dh);
        let dpooled = self.fc1.backward(&trace.pooled, &dh, k);
        let cell = self.spec.pool_size * self.spec.pool_size * c;
        let mut dmap = vec![R::zero(); trace.map.data.len()];
        for (i, plan) in trace.plans.iter().enumerate() {
            plan.backward(&dpooled[i * cell..(i + 1) * cell], c, &mut dmap);
        }
        let [t, h, w, _] = feat_dims;
        let mut dv = Volume::zeros(feat_dims);
        match &mut self.squeeze {
            Some((weight, bias)) => {
                crate::nn::matmul_at_b(h * w, t * c, c, &trace.squeeze_input, &dmap, &mut weight.grad);
                for row in dmap.chunks_exact(c) {
                    bias.grad.iter_mut().zip(row).for_each(|(g, v)| *g += *v);
                }
                let mut drows = vec![R::zero(); h * w * t * c];
                crate::nn::matmul_a_bt(h * w, c, t * c, &dmap, &weight.value, &mut drows);
                for p in 0..h * w {
                    for ti in 0..t {
                        let dst = (ti * h * w + p) * c;
                        let src = p * t * c + ti * c;
                        dv.data[dst..dst + c].copy_from_slice(&drows[src..src + c]);
                    }
                }
            }
            None => {
                let inv = R::from_f64(1.0 / t as f64);
                for ti in 0..t {
                    let slab = &mut dv.data[ti * h * w * c..(ti + 1) * h * w * c];
                    slab.iter_mut().zip(&dmap).for_each(|(d, g)| *d = *g * inv);
                }
            }
        }
        dv
    }

    pub fn params(&self) -> Vec<&Param<R>> {
        let mut v: Vec<&Param<R>> = Vec::new();
        if let Some((w, b)) = &self.squeeze {
            v.push(w);
            v.push(b);
        }
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut v: Vec<&mut Param<R>> = Vec::new();
        if let Some((w, b)) = &mut self.squeeze {
            v.push(w);
            v.push(b);
        }
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

// ---------------------------------------------------------------------------
// Full model

/// Encoder plus prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct CtpModel<R> {
    pub spec: ModelSpec,
    pub encoder: Encoder<R>,
    pub head: Head<R>,
}

/// Everything needed to backpropagate one clip.
#[derive(Debug, Clone)]
pub struct ClipTrace<R> {
    encoder: EncoderTrace<R>,
    head: HeadTrace<R>,
    feat_dims: [usize; 4],
}

impl<R: Real> CtpModel<R> {
    pub fn new<G: Rng + ?Sized>(spec: &ModelSpec, rng: &mut G) -> Result<Self> {
        spec.validate()?;
        let encoder = Encoder::new(&spec.encoder, rng)?;
        let head = Head::new(&spec.head, spec.encoder.output_dims(), rng)?;
        Ok(Self {
            spec: spec.clone(),
            encoder,
            head,
        })
    }

    pub fn normalize(&self, dims: [usize; 4], pixels: &[u8]) -> Volume<R> {
        self.spec.normalization.apply(dims, pixels)
    }

    /// Raw targets `K × T × 4` plus the trace for backpropagation.
    pub fn forward_train(&self, clip: &Volume<R>, queries: &[BBox]) -> Result<(Vec<R>, ClipTrace<R>)> {
        let (v, enc) = self.encoder.forward_train(clip)?;
        let (targets, head) = self.head.forward_train(&v, queries);
        Ok((
            targets,
            ClipTrace {
                encoder: enc,
                head,
                feat_dims: v.dims,
            },
        ))
    }

    pub fn backward(&mut self, trace: &ClipTrace<R>, grad_targets: &[R]) {
        let dv = self.head.backward(&trace.head, grad_targets, trace.feat_dims);
        self.encoder.backward(&trace.encoder, dv);
    }

    /// Raw `K × T × 4` targets in inference mode.
    pub fn predict(&self, clip: &Volume<R>, queries: &[BBox]) -> Result<Vec<R>> {
        let v = self.encoder.encode(clip)?;
        Ok(self.head.forward_train(&v, queries).0)
    }

    /// Predicted trajectories, one per query, decoded against that query.
    pub fn forward(&self, clip: &Volume<R>, queries: &[BBox], sigmas: &Sigmas) -> Result<Vec<Vec<BBox>>> {
        let targets = self.predict(clip, queries)?;
        decode_targets(&targets, queries, self.spec.head.out_t, sigmas)
    }

    pub fn params(&self) -> Vec<&Param<R>> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Decode a flat `K × T × 4` target buffer into per-query trajectories.
pub fn decode_targets<R: Real>(targets: &[R], queries: &[BBox], t: usize, sigmas: &Sigmas) -> Result<Vec<Vec<BBox>>> {
    queries
        .iter()
        .enumerate()
        .map(|(k, q)| {
            (0..t)
                .map(|i| {
                    let o = (k * t + i) * 4;
                    let tv = TargetVec::new(
                        targets[o].as_f64(),
                        targets[o + 1].as_f64(),
                        targets[o + 2].as_f64(),
                        targets[o + 3].as_f64(),
                    );
                    decode_box(q, &tv, sigmas)
                })
                .collect()
        })
        .collect()
}
