//! Downstream evaluation of a pretrained encoder: a linear probe (frozen
//! features or full finetuning), nearest-neighbour clip retrieval, and a
//! procedural motion-classification benchmark to run them on.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::{to_u8, Texture};
use crate::config::{ProbeConfig, ProbeMode, ToyConfig};
use crate::error::{CtpError, Result};
use crate::io::write_atomic;
use crate::model::{Encoder, Normalization};
use crate::nn::{Linear, Param, Volume};
use crate::optim::Sgd;
use crate::seeding::{self, tag};
use crate::trainer::step_lr;

/// Output grid of the retrieval feature, `T × H × W`.
pub const RETRIEVAL_GRID: [usize; 3] = [2, 3, 3];

/// A labelled RGB video, `T × H × W × 3` bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Video {
    pub id: String,
    pub label: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<u8>,
}

impl Video {
    pub fn frame_bytes(&self) -> usize {
        self.h * self.w * 3
    }

    /// Frames `start .. start + len` as one clip buffer.
    pub fn clip(&self, start: usize, len: usize) -> &[u8] {
        let n = self.frame_bytes();
        &self.frames[start * n..(start + len) * n]
    }
}

/// Start frames of `n` clips of length `len` spread evenly over `video_len`
/// frames. A single clip is centered.
pub fn uniform_clip_starts(video_len: usize, len: usize, n: usize) -> Result<Vec<usize>> {
    if video_len < len || len == 0 {
        return Err(CtpError::invalid(format!("video of {video_len} frames is shorter than one clip of {len}")));
    }
    if n == 0 {
        return Err(CtpError::invalid("at least one clip per video is required"));
    }
    let span = video_len - len;
    if n == 1 {
        return Ok(vec![span / 2]);
    }
    Ok((0..n).map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize).collect())
}

/// Average pooling onto a fixed `out` grid; cell `i` of an axis of length
/// `n` covers `floor(i·n/out) .. ceil((i+1)·n/out)`. Output is flattened
/// `T × H × W × C`.
pub fn adaptive_avg_pool(v: &Volume<f32>, out: [usize; 3]) -> Vec<f32> {
    let [t, h, w, c] = v.dims;
    let range = |i: usize, n: usize, o: usize| (i * n / o, ((i + 1) * n).div_ceil(o));
    let mut res = Vec::with_capacity(out.iter().product::<usize>() * c);
    for ot in 0..out[0] {
        let (t0, t1) = range(ot, t, out[0]);
        for oy in 0..out[1] {
            let (y0, y1) = range(oy, h, out[1]);
            for ox in 0..out[2] {
                let (x0, x1) = range(ox, w, out[2]);
                let mut acc = vec![0f64; c];
                for tt in t0..t1 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let o = ((tt * h + y) * w + x) * c;
                            for (a, v) in acc.iter_mut().zip(&v.data[o..o + c]) {
                                *a += *v as f64;
                            }
                        }
                    }
                }
                let n = ((t1 - t0) * (y1 - y0) * (x1 - x0)) as f64;
                res.extend(acc.iter().map(|a| (a / n) as f32));
            }
        }
    }
    res
}

/// Mean over time and space, length `C`.
pub fn global_avg_pool(v: &Volume<f32>) -> Vec<f32> {
    adaptive_avg_pool(v, [1, 1, 1])
}

fn encode_clip(enc: &Encoder<f32>, norm: &Normalization, video: &Video, start: usize) -> Result<Volume<f32>> {
    let len = enc.spec().input_t;
    let x = norm.apply([len, video.h, video.w, 3], video.clip(start, len));
    enc.encode(&x)
}

/// Retrieval feature: each of `n_clips` uniformly spaced clips is encoded
/// and pooled to a `2 × 3 × 3 × C` grid; the flattened grids are averaged.
pub fn extract_video_feature(enc: &Encoder<f32>, norm: &Normalization, video: &Video, n_clips: usize) -> Result<Vec<f32>> {
    let starts = uniform_clip_starts(video.t, enc.spec().input_t, n_clips)?;
    let mut acc: Vec<f64> = Vec::new();
    for s in &starts {
        let f = adaptive_avg_pool(&encode_clip(enc, norm, video, *s)?, RETRIEVAL_GRID);
        if acc.is_empty() {
            acc = vec![0.0; f.len()];
        }
        for (a, v) in acc.iter_mut().zip(f) {
            *a += v as f64;
        }
    }
    let n = starts.len() as f64;
    Ok(acc.iter().map(|a| (a / n) as f32).collect())
}

/// Globally pooled features of each of the `n_clips` uniform clips.
pub fn clip_features(enc: &Encoder<f32>, norm: &Normalization, video: &Video, n_clips: usize) -> Result<Vec<Vec<f32>>> {
    uniform_clip_starts(video.t, enc.spec().input_t, n_clips)?
        .iter()
        .map(|s| Ok(global_avg_pool(&encode_clip(enc, norm, video, *s)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Retrieval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `(k, top-k accuracy)` in the order requested.
    pub topk: Vec<(usize, f64)>,
    /// Vectors with zero norm; they rank below every other item.
    pub zero_norm_gallery: usize,
    pub zero_norm_queries: usize,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity, `−∞` when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>() / (na * nb)
}

/// Gallery indices ordered by decreasing similarity to `q`; ties go to the
/// lower gallery index.
pub fn rank_gallery(gallery: &[Vec<f32>], q: &[f32]) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| cosine(g, q)).collect();
    let mut idx: Vec<usize> = (0..gallery.len()).collect();
    idx.sort_by(|a, b| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b)));
    idx
}

/// Top-k retrieval accuracy of test queries against a training gallery: a
/// query is a hit at `k` when any of its `k` nearest gallery items shares
/// its label.
pub fn retrieval_eval(
    gallery: &[Vec<f32>],
    gallery_labels: &[usize],
    queries: &[Vec<f32>],
    query_labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    if gallery.is_empty() || queries.is_empty() {
        return Err(CtpError::invalid("retrieval needs a non-empty gallery and query set"));
    }
    if gallery.len() != gallery_labels.len() || queries.len() != query_labels.len() {
        return Err(CtpError::invalid("feature and label counts differ"));
    }
    let dim = gallery[0].len();
    if gallery.iter().chain(queries).any(|f| f.len() != dim) {
        return Err(CtpError::invalid("feature vectors differ in length"));
    }
    let mut hits = vec![0usize; ks.len()];
    for (q, ql) in queries.iter().zip(query_labels) {
        let order = rank_gallery(gallery, q);
        let first = order.iter().position(|g| gallery_labels[*g] == *ql);
        for (h, k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|p| p < *k) {
                *h += 1;
            }
        }
    }
    let n = queries.len() as f64;
    Ok(RetrievalReport {
        topk: ks.iter().zip(hits).map(|(k, h)| (*k, h as f64 / n)).collect(),
        zero_norm_gallery: gallery.iter().filter(|g| norm(g) == 0.0).count(),
        zero_norm_queries: queries.iter().filter(|q| norm(q) == 0.0).count(),
    })
}

// ---------------------------------------------------------------------------
// Toy benchmark

/// Motion patterns of the toy benchmark, one per class.
pub const TOY_MOTIONS: [&str; 4] = ["horizontal", "vertical", "diagonal", "zoom"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyBenchmark {
    pub seed: u64,
    pub n_classes: usize,
    pub videos: Vec<Video>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ToyBenchmark {
    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|i| self.videos[*i].label).collect()
    }

    /// Copy with training labels permuted, for a chance-level control.
    pub fn with_shuffled_train_labels(&self, seed: u64) -> Self {
        let mut out = self.clone();
        let mut labels = self.labels(&self.train);
        labels.shuffle(&mut seeding::rng_for(seed, &[tag::TOY, u64::MAX]));
        for (i, l) in self.train.iter().zip(labels) {
            out.videos[*i].label = l;
        }
        out
    }
}

/// Render one toy video: a textured square moving over a static textured
/// background. Appearance is random; only the motion depends on the class.
fn render_toy_video(seed: u64, index: usize, label: usize, cfg: &ToyConfig) -> Video {
    let mut rng = seeding::rng_for(seed, &[tag::TOY, index as u64]);
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let bg = Texture::random(&mut rng, w, h);
    let obj = Texture::random(&mut rng, 32, 32);
    let dim = w.min(h) as f64;
    let size0 = rng.gen_range(0.22..0.34) * dim;
    let steps = (t - 1).max(1) as f64;
    let speed = rng.gen_range(0.016..0.028) * dim;
    let sign = |r: &mut rand_chacha::ChaCha8Rng| if r.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (vx, vy, zoom) = match label % 4 {
        0 => (sign(&mut rng) * speed, 0.0, 1.0),
        1 => (0.0, sign(&mut rng) * speed, 1.0),
        2 => {
            let s = speed / 2f64.sqrt();
            (sign(&mut rng) * s, sign(&mut rng) * s, 1.0)
        }
        _ => {
            let r: f64 = rng.gen_range(1.5..2.0);
            (0.0, 0.0, if rng.gen_bool(0.5) { r } else { 1.0 / r })
        }
    };
    // object size over time and the free room the path needs
    let size_at = |i: f64| size0 * zoom.powf(i / steps);
    let max_size = size_at(0.0).max(size_at(steps));
    let pick = |rng: &mut rand_chacha::ChaCha8Rng, v: f64, extent: f64| {
        let travel = v * steps;
        let lo = max_size / 2.0 + (-travel).max(0.0);
        let hi = extent - max_size / 2.0 - travel.max(0.0);
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            extent / 2.0 - travel / 2.0
        }
    };
    let cx0 = pick(&mut rng, vx, w as f64);
    let cy0 = pick(&mut rng, vy, h as f64);
    let mut frames = Vec::with_capacity(t * h * w * 3);
    for i in 0..t {
        let s = size_at(i as f64);
        let (cx, cy) = (cx0 + vx * i as f64, cy0 + vy * i as f64);
        let (x0, y0) = (cx - s / 2.0, cy - s / 2.0);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let u = (px - x0) / s;
                let v = (py - y0) / s;
                let rgb = if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                    obj.sample(u * (obj.w - 1) as f64, v * (obj.h - 1) as f64)
                } else {
                    bg.sample(x as f64, y as f64)
                };
                frames.extend(rgb.iter().map(|c| to_u8(*c)));
            }
        }
    }
    Video {
        id: format!("toy-{index:05}"),
        label,
        t,
        h,
        w,
        frames,
    }
}

/// Deterministic corpus of `n_classes × per_class` videos with an 80/20
/// split stratified by class. Classes beyond the four motion patterns reuse
/// them, so only `n_classes ≤ 4` gives motion-distinct labels.
pub fn make_toy_benchmark(seed: u64, cfg: &ToyConfig) -> Result<ToyBenchmark> {
    if cfg.n_classes < 2 {
        return Err(CtpError::config("the toy benchmark needs at least 2 classes"));
    }
    if cfg.n_classes > TOY_MOTIONS.len() {
        return Err(CtpError::config(format!("the toy benchmark has {} motion classes", TOY_MOTIONS.len())));
    }
    if cfg.frames < 2 || cfg.height < 16 || cfg.width < 16 {
        return Err(CtpError::config("toy videos need at least 2 frames of 16x16"));
    }
    let n_train = ((cfg.per_class * 4) as f64 / 5.0).round() as usize;
    let mut videos = Vec::with_capacity(cfg.n_classes * cfg.per_class);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in 0..cfg.n_classes {
        for j in 0..cfg.per_class {
            let index = videos.len();
            videos.push(render_toy_video(seed, index, label, cfg));
            if j < n_train {
                train.push(index);
            } else {
                test.push(index);
            }
        }
    }
    Ok(ToyBenchmark {
        seed,
        n_classes: cfg.n_classes,
        videos,
        train,
        test,
    })
}

/// Index file of a benchmark written by [`write_toy_benchmark`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyIndex {
    pub seed: u64,
    pub n_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub videos: Vec<ToyIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyIndexEntry {
    pub id: String,
    pub label: usize,
    pub path: String,
}

pub const TOY_INDEX: &str = "toy.json";

/// Write each video as a clip binary plus a `toy.json` index into `dir`.
pub fn write_toy_benchmark(dir: &Path, bench: &ToyBenchmark) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CtpError::io(dir, e))?;
    let mut videos = Vec::with_capacity(bench.videos.len());
    for v in &bench.videos {
        let path = format!("{}.ctpc", v.id);
        write_atomic(&dir.join(&path), &crate::io::encode_clip([v.t, v.h, v.w, 3], &v.frames))?;
        videos.push(ToyIndexEntry {
            id: v.id.clone(),
            label: v.label,
            path,
        });
    }
    let index = ToyIndex {
        seed: bench.seed,
        n_classes: bench.n_classes,
        train: bench.train.clone(),
        test: bench.test.clone(),
        videos,
    };
    write_atomic(&dir.join(TOY_INDEX), &serde_json::to_vec_pretty(&index).expect("index serializes"))
}

pub fn read_toy_benchmark(dir: &Path) -> Result<ToyBenchmark> {
    let path = dir.join(TOY_INDEX);
    let index: ToyIndex = serde_json::from_slice(&std::fs::read(&path).map_err(|e| CtpError::io(&path, e))?)
        .map_err(|e| CtpError::data(format!("malformed toy index {}: {e}", path.display())))?;
    let n = index.videos.len();
    if index.train.iter().chain(&index.test).any(|i| *i >= n) {
        return Err(CtpError::data("toy split refers to a missing video"));
    }
    let videos = index
        .videos
        .iter()
        .map(|e| {
            let ([t, h, w, c], frames) = crate::io::read_clip(&dir.join(&e.path))?;
            if c != 3 {
                return Err(CtpError::data(format!("toy video {} is not RGB", e.id)));
            }
            Ok(Video {
                id: e.id.clone(),
                label: e.label,
                t,
                h,
                w,
                frames,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ToyBenchmark {
        seed: index.seed,
        n_classes: index.n_classes,
        videos,
        train: index.train,
        test: index.test,
    })
}

// ---------------------------------------------------------------------------
// Linear probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

/// Affine classifier over `dim`-dimensional features.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc: Linear<f64>,
    pub n_classes: usize,
}

impl Classifier {
    pub fn new(dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = seeding::rng_for(seed, &[tag::PROBE]);
        Self {
            fc: Linear::new("probe.fc", dim, n_classes, 0.01, &mut rng),
            n_classes,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.fc.forward(x, 1)
    }

    /// Class with the largest mean logit over `clips`; ties go to the lower class.
    pub fn predict_video(&self, clips: &[Vec<f64>]) -> usize {
        let mut mean = vec![0.0; self.n_classes];
        for c in clips {
            for (m, l) in mean.iter_mut().zip(self.logits(c)) {
                *m += l / clips.len() as f64;
            }
        }
        argmax(&mean)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
        .0
}

/// Mean softmax cross-entropy over `rows` and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &[f64], labels: &[usize], n_classes: usize) -> (f64, Vec<f64>) {
    let rows = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (r, y) in labels.iter().enumerate() {
        let z = &logits[r * n_classes..(r + 1) * n_classes];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        loss += -(z[*y] - m - sum.ln());
        for (c, v) in z.iter().enumerate() {
            let p = (v - m).exp() / sum;
            grad[r * n_classes + c] = (p - if c == *y { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    (loss / rows as f64, grad)
}

/// Per-dimension mean and standard deviation over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Train a classifier on per-clip features. `train` holds, per video, the
/// features of its clips and its label; every clip is a training sample.
pub fn train_classifier(
    train: &[(Vec<Vec<f64>>, usize)],
    n_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(Classifier, f64)> {
    if train.is_empty() {
        return Err(CtpError::invalid("probe needs training videos"));
    }
    if let Some((_, l)) = train.iter().find(|(_, l)| *l >= n_classes) {
        return Err(CtpError::invalid(format!("label {l} out of range for {n_classes} classes")));
    }
    let samples: Vec<(&Vec<f64>, usize)> = train.iter().flat_map(|(cl, l)| cl.iter().map(move |c| (c, *l))).collect();
    let dim = samples[0].0.len();
    let mut clf = Classifier::new(dim, n_classes, seed);
    let mut opt = Sgd::new(&clf.fc.params(), cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = step_lr(epoch, cfg.epochs, cfg.base_lr, cfg.lr_decay, &cfg.milestones)?;
        order.shuffle(&mut seeding::rng_for(seed, &[tag::PROBE, epoch as u64]));
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x: Vec<f64> = batch.iter().flat_map(|i| samples[*i].0.iter().copied()).collect();
            let y: Vec<usize> = batch.iter().map(|i| samples[*i].1).collect();
            let logits = clf.fc.forward(&x, batch.len());
            let (loss, g) = softmax_xent(&logits, &y, n_classes);
            if !loss.is_finite() {
                return Err(CtpError::Numeric(format!("probe loss is {loss} at epoch {epoch}")));
            }
            sum += loss * batch.len() as f64;
            for p in clf.fc.params_mut() {
                p.zero_grad();
            }
            clf.fc.backward(&x, &g, batch.len());
            opt.step(clf.fc.params_mut().into_iter().collect(), lr)?;
        }
        last = sum / samples.len() as f64;
    }
    Ok((clf, last))
}

fn accuracy(clf: &Classifier, videos: &[(Vec<Vec<f64>>, usize)]) -> f64 {
    let hits = videos.iter().filter(|(c, l)| clf.predict_video(c) == *l).count();
    hits as f64 / videos.len().max(1) as f64
}

/// Per-video clip features for `idx`, as f64.
fn probe_features(enc: &Encoder<f32>, norm: &Normalization, bench: &ToyBenchmark, idx: &[usize], n_clips: usize) -> Result<Vec<(Vec<Vec<f64>>, usize)>> {
    idx.iter()
        .map(|i| {
            let v = &bench.videos[*i];
            let clips = clip_features(enc, norm, v, n_clips)?;
            Ok((clips.into_iter().map(|c| c.into_iter().map(|x| x as f64).collect()).collect(), v.label))
        })
        .collect()
}

/// Evaluate `enc` on `bench` with a linear classifier on globally pooled
/// features. In frozen mode only the classifier trains; in finetune mode
/// the encoder trains too (on a private copy).
pub fn linear_probe(enc: &Encoder<f32>, norm: &Normalization, bench: &ToyBenchmark, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    if bench.videos.iter().any(|v| v.label >= bench.n_classes) {
        return Err(CtpError::invalid("benchmark labels exceed its class count"));
    }
    match cfg.mode {
        ProbeMode::Frozen => {
            let mut train = probe_features(enc, norm, bench, &bench.train, cfg.n_clips)?;
            let mut test = probe_features(enc, norm, bench, &bench.test, cfg.n_clips)?;
            let all: Vec<Vec<f64>> = train.iter().flat_map(|(c, _)| c.iter().cloned()).collect();
            let st = if cfg.standardize {
                Standardizer::fit(&all)
            } else {
                Standardizer::identity(all[0].len())
            };
            for (clips, _) in train.iter_mut().chain(test.iter_mut()) {
                for c in clips.iter_mut() {
                    *c = st.apply(c);
                }
            }
            let (clf, final_loss) = train_classifier(&train, bench.n_classes, cfg, seed)?;
            Ok(ProbeReport {
                mode: cfg.mode,
                train_accuracy: accuracy(&clf, &train),
                test_accuracy: accuracy(&clf, &test),
                final_loss,
            })
        }
        ProbeMode::Finetune => finetune(enc.clone(), norm, bench, cfg, seed),
    }
}

/// Random crop (resized back), horizontal flip and brightness/contrast
/// jitter applied identically to every frame of a clip.
pub fn augment_clip<G: Rng + ?Sized>(rng: &mut G, dims: [usize; 4], clip: &[u8]) -> Vec<u8> {
    let [t, h, w, _] = dims;
    let scale = rng.gen_range(0.8..=1.0);
    let (cw, ch) = (((w as f64) * scale).round().max(1.0) as usize, ((h as f64) * scale).round().max(1.0) as usize);
    let ox = rng.gen_range(0..=w - cw);
    let oy = rng.gen_range(0..=h - ch);
    let flip = rng.gen_bool(0.5);
    let gain = rng.gen_range(0.8..1.2);
    let bias = rng.gen_range(-20.0..20.0);
    let mut out = Vec::with_capacity(clip.len());
    for f in 0..t {
        let frame = &clip[f * h * w * 3..(f + 1) * h * w * 3];
        for y in 0..h {
            let sy = ((y as f64 + 0.5) * ch as f64 / h as f64 - 0.5).clamp(0.0, (ch - 1) as f64);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = ((xx as f64 + 0.5) * cw as f64 / w as f64 - 0.5).clamp(0.0, (cw - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(cw - 1), (y0 + 1).min(ch - 1));
                let (lx, ly) = (sx - x0 as f64, sy - y0 as f64);
                for c in 0..3 {
                    let p = |yy: usize, xx: usize| frame[((oy + yy) * w + ox + xx) * 3 + c] as f64;
                    let v = (1.0 - ly) * ((1.0 - lx) * p(y0, x0) + lx * p(y0, x1)) + ly * ((1.0 - lx) * p(y1, x0) + lx * p(y1, x1));
                    out.push(to_u8((v * gain + bias) as f32));
                }
            }
        }
    }
    out
}

fn finetune(mut enc: Encoder<f32>, norm: &Normalization, bench: &ToyBenchmark, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    let c = enc.spec().channels();
    let len = enc.spec().input_t;
    let mut rng = seeding::rng_for(seed, &[tag::PROBE, u64::MAX]);
    let mut fc = Linear::<f32>::new("probe.fc", c, bench.n_classes, 0.01, &mut rng);
    let mut enc_opt = Sgd::new(&enc.params(), cfg.momentum, cfg.weight_decay);
    let mut fc_opt = Sgd::new(&fc.params(), cfg.momentum, cfg.weight_decay);
    let mut order = bench.train.clone();
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = step_lr(epoch, cfg.epochs, cfg.base_lr, cfg.lr_decay, &cfg.milestones)?;
        order.shuffle(&mut seeding::rng_for(seed, &[tag::PROBE, epoch as u64]));
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for p in enc.params_mut() {
                p.zero_grad();
            }
            for p in fc.params_mut() {
                p.zero_grad();
            }
            for i in batch {
                let v = &bench.videos[*i];
                let mut crng = seeding::rng_for(seed, &[tag::AUGMENT, epoch as u64, *i as u64]);
                let start = crng.gen_range(0..=v.t - len);
                let dims = [len, v.h, v.w, 3];
                let raw = if cfg.augment {
                    augment_clip(&mut crng, dims, v.clip(start, len))
                } else {
                    v.clip(start, len).to_vec()
                };
                let x = norm.apply(dims, &raw);
                let (feat, trace) = enc.forward_train(&x)?;
                let pooled = global_avg_pool(&feat);
                let logits: Vec<f64> = fc.forward(&pooled, 1).iter().map(|v| *v as f64).collect();
                let (loss, g) = softmax_xent(&logits, &[v.label], bench.n_classes);
                if !loss.is_finite() {
                    return Err(CtpError::Numeric(format!("finetune loss is {loss} at epoch {epoch}")));
                }
                sum += loss;
                let scale = 1.0 / batch.len() as f64;
                let g: Vec<f32> = g.iter().map(|v| (v * scale) as f32).collect();
                let dpool = fc.backward(&pooled, &g, 1);
                let n = (feat.dims[0] * feat.dims[1] * feat.dims[2]) as f32;
                let mut dv = Volume::zeros(feat.dims);
                for cell in dv.data.chunks_exact_mut(c) {
                    for (d, p) in cell.iter_mut().zip(&dpool) {
                        *d = *p / n;
                    }
                }
                enc.backward(&trace, dv);
            }
            enc_opt.step(enc.params_mut(), lr)?;
            fc_opt.step(fc.params_mut().into_iter().collect(), lr)?;
        }
        last = sum / order.len() as f64;
    }
    let clf = Classifier {
        fc: Linear {
            n_in: c,
            n_out: bench.n_classes,
            weight: cast(&fc.weight),
            bias: cast(&fc.bias),
        },
        n_classes: bench.n_classes,
    };
    let train = probe_features(&enc, norm, bench, &bench.train, cfg.n_clips)?;
    let test = probe_features(&enc, norm, bench, &bench.test, cfg.n_clips)?;
    Ok(ProbeReport {
        mode: ProbeMode::Finetune,
        train_accuracy: accuracy(&clf, &train),
        test_accuracy: accuracy(&clf, &test),
        final_loss: last,
    })
}

fn cast(p: &Param<f32>) -> Param<f64> {
    p.cast()
}

// ---------------------------------------------------------------------------
// Feature store

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndexEntry {
    pub video_id: String,
    pub label: usize,
    /// Offset into the binary file, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub dim: usize,
    pub entries: Vec<FeatureIndexEntry>,
}

/// Write `features` as little-endian f32 to `bin` and the index to `index`.
pub fn write_feature_store(bin: &Path, index: &Path, ids: &[String], labels: &[usize], features: &[Vec<f32>]) -> Result<()> {
    if ids.len() != features.len() || labels.len() != features.len() {
        return Err(CtpError::invalid("feature store inputs differ in length"));
    }
    let dim = features.first().map_or(0, |f| f.len());
    if features.iter().any(|f| f.len() != dim) {
        return Err(CtpError::invalid("feature vectors differ in length"));
    }
    let mut bytes = Vec::with_capacity(features.len() * dim * 4);
    for f in features {
        for v in f {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let idx = FeatureIndex {
        dim,
        entries: ids
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (id, l))| FeatureIndexEntry {
                video_id: id.clone(),
                label: *l,
                offset: i * dim,
            })
            .collect(),
    };
    write_atomic(bin, &bytes)?;
    write_atomic(index, &serde_json::to_vec_pretty(&idx).expect("index serializes"))
}

pub fn read_feature_store(bin: &Path, index: &Path) -> Result<(FeatureIndex, Vec<Vec<f32>>)> {
    let idx: FeatureIndex = serde_json::from_slice(&std::fs::read(index).map_err(|e| CtpError::io(index, e))?)
        .map_err(|e| CtpError::data(format!("malformed feature index: {e}")))?;
    let bytes = std::fs::read(bin).map_err(|e| CtpError::io(bin, e))?;
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let feats = idx
        .entries
        .iter()
        .map(|e| {
            floats
                .get(e.offset..e.offset + idx.dim)
                .map(|s| s.to_vec())
                .ok_or_else(|| CtpError::data(format!("feature of {} lies outside the store", e.video_id)))
        })
        .collect::<Result<_>>()?;
    Ok((idx, feats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderSpec;

    #[test]
    fn toy_benchmark_round_trips_through_disk() {
        let cfg = ToyConfig {
            n_classes: 2,
            per_class: 3,
            frames: 4,
            height: 16,
            width: 16,
        };
        let bench = make_toy_benchmark(5, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_toy_benchmark(dir.path(), &bench).unwrap();
        assert_eq!(read_toy_benchmark(dir.path()).unwrap(), bench);
    }

    fn small_encoder(seed: u64) -> Encoder<f32> {
        let spec = EncoderSpec {
            input_t: 4,
            input_h: 32,
            input_w: 32,
            widths: vec![4, 8],
            spatial_stride: 4,
            temporal_stride: 2,
            ..EncoderSpec::default()
        };
        Encoder::new(&spec, &mut seeding::rng_for(seed, &[tag::INIT])).unwrap()
    }

    #[test]
    fn adaptive_pool_fixed_point_and_mean() {
        let data: Vec<f32> = (0..2 * 3 * 3 * 2).map(|i| i as f32).collect();
        let v = Volume::from_vec([2, 3, 3, 2], data.clone());
        assert_eq!(adaptive_avg_pool(&v, [2, 3, 3]), data);
        let g = global_avg_pool(&v);
        assert_eq!(g, vec![17.0, 18.0]);
    }

    #[test]
    fn adaptive_pool_overlapping_cells() {
        // length 5 onto 3 cells: [0,2), [1,4), [3,5)
        let v = Volume::from_vec([1, 1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(adaptive_avg_pool(&v, [1, 1, 3]), vec![1.5, 3.0, 4.5]);
    }

    #[test]
    fn clip_starts() {
        assert_eq!(uniform_clip_starts(16, 8, 3).unwrap(), vec![0, 4, 8]);
        assert_eq!(uniform_clip_starts(16, 8, 1).unwrap(), vec![4]);
        assert_eq!(uniform_clip_starts(8, 8, 2).unwrap(), vec![0, 0]);
        assert!(uniform_clip_starts(7, 8, 1).is_err());
    }

    #[test]
    fn constant_video_feature_is_single_clip_feature() {
        let enc = small_encoder(1);
        let norm = Normalization::default();
        let v = Video {
            id: "c".into(),
            label: 0,
            t: 9,
            h: 32,
            w: 32,
            frames: vec![100; 9 * 32 * 32 * 3],
        };
        let one = extract_video_feature(&enc, &norm, &v, 1).unwrap();
        let many = extract_video_feature(&enc, &norm, &v, 4).unwrap();
        assert_eq!(one.len(), 18 * 8);
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_one_hot_retrieval() {
        let eye: Vec<Vec<f32>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let r = retrieval_eval(&eye, &[0, 1, 2], &eye, &[0, 1, 2], &[1, 2]).unwrap();
        assert_eq!(r.topk, vec![(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn zero_norm_ranks_last_and_ties_break_by_index() {
        let g = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(rank_gallery(&g, &[1.0, 0.0]), vec![1, 2, 0]);
        let r = retrieval_eval(&g, &[0, 1, 1], &[vec![1.0, 0.0]], &[0], &[1, 2, 3]).unwrap();
        assert_eq!(r.topk, vec![(1, 0.0), (2, 0.0), (3, 1.0)]);
        assert_eq!(r.zero_norm_gallery, 1);
    }

    #[test]
    fn toy_benchmark_is_deterministic_and_balanced() {
        let cfg = ToyConfig {
            per_class: 5,
            frames: 6,
            height: 24,
            width: 24,
            ..ToyConfig::default()
        };
        let a = make_toy_benchmark(3, &cfg).unwrap();
        assert_eq!(a, make_toy_benchmark(3, &cfg).unwrap());
        assert_ne!(a.videos[0].frames, make_toy_benchmark(4, &cfg).unwrap().videos[0].frames);
        assert_eq!(a.videos.len(), 20);
        assert_eq!((a.train.len(), a.test.len()), (16, 4));
        for c in 0..4 {
            assert_eq!(a.labels(&a.train).iter().filter(|l| **l == c).count(), 4);
            assert_eq!(a.labels(&a.test).iter().filter(|l| **l == c).count(), 1);
        }
        assert!(make_toy_benchmark(3, &ToyConfig { n_classes: 1, ..cfg.clone() }).is_err());
        let s = a.with_shuffled_train_labels(0);
        let mut before = a.labels(&a.train);
        let mut after = s.labels(&s.train);
        before.sort();
        after.sort();
        assert_eq!(before, after);
        assert_eq!(s.labels(&s.test), a.labels(&a.test));
    }

    #[test]
    fn separable_features_fit_perfectly() {
        let train: Vec<(Vec<Vec<f64>>, usize)> = (0..30)
            .map(|i| {
                let l = i % 3;
                let mut f = vec![0.1 * (i as f64 / 30.0); 3];
                f[l] += 1.0;
                (vec![f], l)
            })
            .collect();
        let cfg = ProbeConfig {
            epochs: 60,
            base_lr: 0.1,
            milestones: vec![],
            ..ProbeConfig::default()
        };
        let (clf, _) = train_classifier(&train, 3, &cfg, 0).unwrap();
        assert_eq!(accuracy(&clf, &train), 1.0);
        assert!(train_classifier(&train, 2, &cfg, 0).is_err());
    }

    #[test]
    fn video_prediction_averages_logits() {
        let mut clf = Classifier::new(2, 2, 0);
        clf.fc.weight.value = vec![1.0, 0.0, 0.0, 1.0];
        clf.fc.bias.value = vec![0.0, 0.0];
        // per clip the winners disagree; the mean logit decides
        let clips = vec![vec![3.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.5]];
        assert_eq!(clf.predict_video(&clips), 0);
        let clips = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.5]];
        assert_eq!(clf.predict_video(&clips), 1);
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let z = vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.4];
        let y = [2, 0];
        let (_, g) = softmax_xent(&z, &y, 3);
        for i in 0..z.len() {
            let mut p = z.clone();
            p[i] += 1e-6;
            let mut m = z.clone();
            m[i] -= 1e-6;
            let fd = (softmax_xent(&p, &y, 3).0 - softmax_xent(&m, &y, 3).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn feature_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (bin, idx) = (dir.path().join("f.bin"), dir.path().join("f.json"));
        let feats = vec![vec![1.0, 2.0], vec![3.5, -1.0]];
        write_feature_store(&bin, &idx, &["a".into(), "b".into()], &[0, 1], &feats).unwrap();
        let (index, back) = read_feature_store(&bin, &idx).unwrap();
        assert_eq!(back, feats);
        assert_eq!(index.entries[1].offset, 2);
    }

    #[test]
    fn augmentation_keeps_shape() {
        let clip: Vec<u8> = (0..2 * 8 * 8 * 3).map(|i| (i % 256) as u8).collect();
        let out = augment_clip(&mut seeding::rng_for(0, &[]), [2, 8, 8, 3], &clip);
        assert_eq!(out.len(), clip.len());
    }
}
