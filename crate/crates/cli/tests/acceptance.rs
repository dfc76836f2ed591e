//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! Positional arguments select criteria by number, e.g.
//! `cargo test --test acceptance -- 1 7 8`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use ctp_cli::{main_with_args, Metrics, METRICS, RUN_MANIFEST};
use ctp_core::compositor::sample_visibility;
use ctp_core::config::CtpConfig;
use ctp_core::dataset::{worker_pool, ClipProvider};
use ctp_core::geometry::{decode_box, encode_targets, smooth_l1, smooth_l1_grad, BBox, Sigmas};
use ctp_core::model::{pool_region, CtpModel, EncoderSpec, HeadSpec, ModelSpec, ROI_SAMPLES};
use ctp_core::nn::Volume;
use ctp_core::objective::{batch_loss, target_loss_grad};
use ctp_core::seeding::{self, tag};
use ctp_core::trainer::{evaluate_iou, Trainer};
use ctp_core::trajsynth::{sample_trajectory, Trajectory, TrajectoryConstraints};
use ctp_core::transfer::{cosine, linear_probe, make_toy_benchmark, retrieval_eval};

const TRANSFER_CONFIG: &str = include_str!("../../../configs/transfer_toy.toml");

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= budget, || format!("took {:.1}s, budget {}s", t.as_secs_f64(), budget.as_secs()))
}

fn ctp(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with_args(std::iter::once("ctp").chain(args.iter().copied()), &mut out, &mut err);
    if code != 0 {
        return Err(format!("ctp {} exited {code}: {}", args.join(" "), String::from_utf8_lossy(&err)));
    }
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.02..0.9),
        rng.gen_range(0.02..0.9),
    )
}

// ---------------------------------------------------------------------------

fn geometry_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = Sigmas::default();
    let mut worst = 0f64;
    for _ in 0..1000 {
        let (q, g) = (random_box(&mut rng), random_box(&mut rng));
        let t = encode_targets(&q, &g, &s).map_err(|e| e.to_string())?;
        let back = decode_box(&q, &t, &s).map_err(|e| e.to_string())?;
        for (a, b) in back.to_array().iter().zip(g.to_array()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("round-trip error {worst:e}"))?;
    let h = 1e-13;
    let mut jump = 0f64;
    for x in [1.0f64, -1.0] {
        jump = jump
            .max((smooth_l1(x - h) - smooth_l1(x + h)).abs())
            .max((smooth_l1_grad(x - h) - smooth_l1_grad(x + h)).abs())
            .max((smooth_l1(x) - 0.5).abs());
    }
    ensure(jump <= 1e-12, || format!("Smooth-L1 discontinuity {jump:e} at |x| = 1"))?;
    within(start, Duration::from_secs(1))?;
    Ok(format!("max round-trip error {worst:.1e}, Smooth-L1 jump {jump:.1e}"))
}

fn micro_spec() -> ModelSpec {
    ModelSpec {
        encoder: EncoderSpec {
            input_t: 4,
            input_h: 16,
            input_w: 16,
            spatial_stride: 4,
            temporal_stride: 2,
            widths: vec![3, 4],
            ..EncoderSpec::default()
        },
        head: HeadSpec {
            pool_size: 2,
            hidden: 6,
            out_t: 4,
            squeeze_enabled: true,
        },
        ..ModelSpec::default()
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = micro_spec();
    let s = Sigmas::default();
    let mut model = CtpModel::<f64>::new(&spec, &mut rng).map_err(|e| e.to_string())?;
    // move the last layer off zero so every parameter receives gradient
    for p in model.params_mut() {
        if p.name == "head.fc2.weight" {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        }
    }
    let c = TrajectoryConstraints::default();
    let clips: Vec<(Volume<f64>, Vec<Trajectory>)> = (0..2)
        .map(|_| {
            let pixels: Vec<u8> = (0..4 * 16 * 16 * 3).map(|_| rng.gen()).collect();
            let x = model.normalize([4, 16, 16, 3], &pixels);
            let trajs = (0..2).map(|_| sample_trajectory(&mut rng, 4, &c).unwrap()).collect();
            (x, trajs)
        })
        .collect();
    let loss = |m: &CtpModel<f64>| -> f64 {
        let mut preds = Vec::new();
        for (x, trajs) in &clips {
            let q: Vec<BBox> = trajs.iter().map(|t| t.query()).collect();
            preds.push(m.forward(x, &q, &s).unwrap());
        }
        let pairs: Vec<(&Trajectory, &[BBox])> = clips
            .iter()
            .zip(&preds)
            .flat_map(|((_, trajs), p)| trajs.iter().zip(p).map(|(t, b)| (t, b.as_slice())))
            .collect();
        batch_loss(&pairs, &s).unwrap().total
    };
    model.zero_grad();
    for (x, trajs) in &clips {
        let q: Vec<BBox> = trajs.iter().map(|t| t.query()).collect();
        let (targets, trace) = model.forward_train(x, &q).map_err(|e| e.to_string())?;
        let mut grad = vec![0.0; targets.len()];
        for (k, tr) in trajs.iter().enumerate() {
            let span = k * 16..(k + 1) * 16;
            let (_, g) = target_loss_grad(&q[k], &tr.boxes, &targets[span.clone()], &s).map_err(|e| e.to_string())?;
            grad[span].iter_mut().zip(g).for_each(|(d, v)| *d = v / 4.0);
        }
        model.backward(&trace, &grad);
    }
    let mut worst = 0f64;
    let mut checked = 0;
    let n_params = model.params().len();
    for pi in 0..n_params {
        let len = model.params()[pi].len();
        let mut picks: Vec<usize> = (0..6).map(|_| rng.gen_range(0..len)).collect();
        picks.extend([0, len - 1]);
        for j in picks {
            let analytic = model.params()[pi].grad[j];
            let h = 1e-6;
            model.params_mut()[pi].value[j] += h;
            let fp = loss(&model);
            model.params_mut()[pi].value[j] -= 2.0 * h;
            let fm = loss(&model);
            model.params_mut()[pi].value[j] += h;
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(analytic.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (fd - analytic).abs() / scale;
            if rel > worst {
                worst = rel;
            }
            ensure(rel < 1e-4, || {
                format!("{}[{j}]: finite difference {fd:e} vs analytic {analytic:e}", model.params()[pi].name)
            })?;
            checked += 1;
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("{checked} gradient entries over {n_params} tensors, worst relative error {worst:.1e}"))
}

fn trajectory_audit() -> Outcome {
    let start = Instant::now();
    let c = TrajectoryConstraints::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let speed = 3.0 / 112.0;
    let (lo, hi) = ((-0.025f64).exp(), 0.025f64.exp());
    let tol = 1e-9;
    let mut violations = Vec::new();
    for n in 0..10_000 {
        let len = 8;
        let t = sample_trajectory(&mut rng, len, &c).map_err(|e| e.to_string())?;
        for (i, pair) in t.boxes.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            if (b.cx - a.cx).abs() > speed + tol || (b.cy - a.cy).abs() > speed + tol {
                violations.push(format!("#{n} speed at frame {}", i + 1));
            }
            for r in [b.w / a.w, b.h / a.h] {
                if r < lo - tol || r > hi + tol {
                    violations.push(format!("#{n} size ratio {r} at frame {}", i + 1));
                }
            }
        }
        for (i, b) in t.boxes.iter().enumerate() {
            let inside = b.cx - b.w / 2.0 >= -tol && b.cx + b.w / 2.0 <= 1.0 + tol && b.cy - b.h / 2.0 >= -tol && b.cy + b.h / 2.0 <= 1.0 + tol;
            if !inside || b.w <= 0.0 || b.h <= 0.0 {
                violations.push(format!("#{n} out of frame at {i}"));
            }
        }
        // piecewise-linear rebuild from the key frames alone
        let kf = &t.keyframe_indices;
        if kf.first() != Some(&0) || kf.last() != Some(&(len - 1)) || !(3..=5).contains(&kf.len()) {
            violations.push(format!("#{n} key frames {kf:?}"));
            continue;
        }
        for w in kf.windows(2) {
            let (a, b) = (t.boxes[w[0]].to_array(), t.boxes[w[1]].to_array());
            for i in w[0]..=w[1] {
                let f = (i - w[0]) as f64 / (w[1] - w[0]) as f64;
                let got = t.boxes[i].to_array();
                for d in 0..4 {
                    let want = a[d] + f * (b[d] - a[d]);
                    let exact = i == w[0] || i == w[1];
                    if (exact && got[d] != want) || (got[d] - want).abs() > 1e-12 {
                        violations.push(format!("#{n} interpolation at frame {i}"));
                    }
                }
            }
        }
    }
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    within(start, Duration::from_secs(60))?;
    Ok("10000 trajectories, 0 violations".into())
}

fn mrm_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut masked, mut frames, mut first_hidden) = (0usize, 0usize, 0usize);
    let samples = 16_000;
    for _ in 0..samples {
        let v = sample_visibility(&mut rng, 8, 0.2).map_err(|e| e.to_string())?;
        first_hidden += usize::from(!v[0]);
        masked += v[1..].iter().filter(|x| !**x).count();
        frames += 7;
    }
    // the full synthesis path stores the same visibility in every clip
    let mut cfg = CtpConfig::default();
    cfg.data.num_clips = 64;
    let provider = ClipProvider::synthesizing(&cfg).map_err(|e| e.to_string())?;
    for i in 0..cfg.data.num_clips {
        for t in provider.clip(i, 0).map_err(|e| e.to_string())?.trajectories {
            first_hidden += usize::from(!t.visible[0]);
        }
    }
    let rate = masked as f64 / frames as f64;
    ensure(frames >= 100_000, || format!("only {frames} frames"))?;
    ensure((rate - 0.2).abs() <= 0.01, || format!("mask rate {rate:.4}"))?;
    ensure(first_hidden == 0, || format!("frame 0 hidden {first_hidden} times"))?;
    Ok(format!("mask rate {rate:.4} over {frames} frames, frame 0 always visible"))
}

fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() != RUN_MANIFEST)
        .map(|e| {
            let bytes = std::fs::read(e.path()).unwrap();
            (e.file_name().to_string_lossy().into_owned(), format!("{:x}", Sha256::digest(&bytes)))
        })
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |n: &str| dir.path().join(n).display().to_string();
    for out in ["gen-a", "gen-b"] {
        ctp(&["generate", "--seed", "7", "--num-clips", "16", "--out", &d(out)])?;
    }
    let (a, b) = (tree_digest(&dir.path().join("gen-a")), tree_digest(&dir.path().join("gen-b")));
    ensure(a.len() == 33, || format!("unexpected file count {}", a.len()))?;
    ensure(a == b, || "generated directories differ".into())?;

    let cfg_path = dir.path().join("c.toml");
    std::fs::write(&cfg_path, include_str!("../../../configs/tiny.toml").replace("epochs = 2\n", "epochs = 4\n"))
        .map_err(|e| e.to_string())?;
    let cfg = cfg_path.display().to_string();
    ctp(&["pretrain", "--config", &cfg, "--out", &d("full")])?;
    ctp(&["pretrain", "--config", &cfg, "--out", &d("split"), "--max-epochs", "2"])?;
    let mid = dir.path().join("split").join("ckpt-epoch0002.ctpk");
    ctp(&["pretrain", "--config", &cfg, "--out", &d("split"), "--resume", &mid.display().to_string()])?;
    let read = |run: &str, f: &str| std::fs::read(dir.path().join(run).join(f)).map_err(|e| e.to_string());
    ensure(read("full", "final.ctpk")? == read("split", "final.ctpk")?, || {
        "resumed final checkpoint differs from the uninterrupted run".into()
    })?;
    ensure(read("full", "train_log.jsonl")? == read("split", "train_log.jsonl")?, || {
        "resumed training log differs from the uninterrupted run".into()
    })?;
    Ok("generate --seed 7 twice: identical checksums; resume at epoch 2 of 4 is bitwise identical".into())
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let mut cfg = CtpConfig::default();
    cfg.seed = 1;
    cfg.data.num_clips = 8;
    cfg.train.epochs = 2000;
    cfg.train.milestones = vec![];
    cfg.train.batch_size = 8;
    let e = &cfg.model.encoder;
    ensure((e.input_t, e.input_h, e.input_w) == (8, 64, 64), || "default clip shape changed".into())?;
    let source = ClipProvider::synthesizing(&cfg).map_err(|e| e.to_string())?;
    let clips = (0..8).map(|i| source.clip(i, 0)).collect::<ctp_core::Result<Vec<_>>>().map_err(|e| e.to_string())?;
    let pool = worker_pool(Some(1)).map_err(|e| e.to_string())?;
    let mut tr = Trainer::new(&cfg, ClipProvider::fixed(clips.clone()), pool).map_err(|e| e.to_string())?;
    let mut initial = None;
    let mut last = (0.0, 0.0);
    while !tr.is_finished() {
        let s = tr.train_epoch(&mut |_| Ok(())).map_err(|e| e.to_string())?;
        let l0 = *initial.get_or_insert(s.mean_loss);
        if tr.step % 25 == 0 {
            let iou = evaluate_iou(&tr.model, &clips, &cfg.sigmas).map_err(|e| e.to_string())?;
            last = (s.mean_loss / l0, iou);
            if iou >= 0.8 && s.mean_loss < 1e-3 * l0 {
                within(start, Duration::from_secs(600))?;
                return Ok(format!("step {}: IoU {iou:.3}, loss ratio {:.1e}", tr.step, s.mean_loss / l0));
            }
        }
    }
    Err(format!("after 2000 steps: loss ratio {:.1e}, IoU {:.3}", last.0, last.1))
}

/// Bilinear value at continuous `(y, x)` as a dense sum over every map cell
/// of the tent kernel, with coordinates clamped to the map.
fn dense_bilinear(map: &Volume<f64>, y: f64, x: f64, ch: usize) -> f64 {
    let (h, w) = (map.h(), map.w());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let mut v = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k = (1.0 - (y - i as f64).abs()).max(0.0) * (1.0 - (x - j as f64).abs()).max(0.0);
            v += k * map.at(0, i, j, ch);
        }
    }
    v
}

fn pooling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (h, w, c) = (rng.gen_range(2..12), rng.gen_range(2..12), rng.gen_range(1..5));
        let p = rng.gen_range(1..6);
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = Volume::from_vec([1, h, w, c], data);
        // boxes may overhang the frame to exercise clamping
        let b = BBox::new(rng.gen_range(-0.1..1.1), rng.gen_range(-0.1..1.1), rng.gen_range(0.05..1.2), rng.gen_range(0.05..1.2));
        let got = pool_region(&map, &b, p);
        let n = ROI_SAMPLES as f64;
        for py in 0..p {
            for px in 0..p {
                for ch in 0..c {
                    let mut want = 0.0;
                    for sy in 0..ROI_SAMPLES {
                        for sx in 0..ROI_SAMPLES {
                            let y = (b.cy - b.h / 2.0) * h as f64 + (py as f64 + (sy as f64 + 0.5) / n) * b.h * h as f64 / p as f64 - 0.5;
                            let x = (b.cx - b.w / 2.0) * w as f64 + (px as f64 + (sx as f64 + 0.5) / n) * b.w * w as f64 / p as f64 - 0.5;
                            want += dense_bilinear(&map, y, x, ch) / (n * n);
                        }
                    }
                    worst = worst.max((got.at(0, py, px, ch) - want).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 random (map, box) pairs, max deviation {worst:.1e}"))
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 50;
    let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
    let mut feats: Vec<Vec<f32>> = (0..n).map(|_| (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
    // duplicates create exact ties
    feats[31] = feats[2].clone();
    feats[47] = feats[2].clone();
    feats[30] = feats[8].clone();
    let (queries, gallery): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % 3 == 0);
    let ks = [1, 2, 3, 5, 10, 20, 40];
    let pick = |idx: &[usize]| idx.iter().map(|i| feats[*i].clone()).collect::<Vec<_>>();
    let lab = |idx: &[usize]| idx.iter().map(|i| labels[*i]).collect::<Vec<_>>();
    let report = retrieval_eval(&pick(&gallery), &lab(&gallery), &pick(&queries), &lab(&queries), &ks).map_err(|e| e.to_string())?;
    let mut brute = vec![0usize; ks.len()];
    for &q in &queries {
        let mut scored: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(gi, &g)| {
                let dot: f64 = feats[q].iter().zip(&feats[g]).map(|(a, b)| *a as f64 * *b as f64).sum();
                let na: f64 = feats[q].iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = feats[g].iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                (dot / (na * nb), gi)
            })
            .collect();
        for (s, gi) in &scored {
            ensure((s - cosine(&feats[q], &feats[gallery[*gi]])).abs() < 1e-12, || "cosine mismatch".into())?;
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (h, k) in brute.iter_mut().zip(ks) {
            if scored.iter().take(k).any(|(_, gi)| labels[gallery[*gi]] == labels[q]) {
                *h += 1;
            }
        }
    }
    let expect: Vec<(usize, f64)> = ks.iter().zip(&brute).map(|(k, h)| (*k, *h as f64 / queries.len() as f64)).collect();
    ensure(report.topk == expect, || format!("retrieval {:?} vs brute force {:?}", report.topk, expect))?;
    ensure(report.topk.windows(2).all(|w| w[0].1 <= w[1].1), || "top-k accuracy decreases in k".into())?;
    let topk: Vec<String> = report.topk.iter().map(|(k, a)| format!("top-{k} {:.3}", a)).collect();
    Ok(format!("{} queries vs {} gallery items match brute force exactly; {}", queries.len(), gallery.len(), topk.join(", ")))
}

fn transfer_benefit() -> Outcome {
    let start = Instant::now();
    let base = CtpConfig::from_toml_str(TRANSFER_CONFIG).map_err(|e| e.to_string())?;
    let mut gaps = Vec::new();
    let mut shuffled = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = ClipProvider::synthesizing(&cfg).map_err(|e| e.to_string())?;
        let mut tr = Trainer::new(&cfg, data, worker_pool(Some(1)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        while !tr.is_finished() {
            tr.train_epoch(&mut |_| Ok(())).map_err(|e| e.to_string())?;
        }
        let bench = make_toy_benchmark(seed, &cfg.toy).map_err(|e| e.to_string())?;
        let norm = cfg.model.normalization;
        let random = CtpModel::<f32>::new(&cfg.model, &mut seeding::rng_for(seed, &[tag::INIT])).map_err(|e| e.to_string())?;
        let pre = linear_probe(&tr.model.encoder, &norm, &bench, &cfg.probe, seed).map_err(|e| e.to_string())?;
        let rnd = linear_probe(&random.encoder, &norm, &bench, &cfg.probe, seed).map_err(|e| e.to_string())?;
        let shuf = linear_probe(&tr.model.encoder, &norm, &bench.with_shuffled_train_labels(seed), &cfg.probe, seed)
            .map_err(|e| e.to_string())?;
        println!(
            "    seed {seed}: pretrained {:.1}%, random init {:.1}%, shuffled labels {:.1}% ({:.0}s)",
            100.0 * pre.test_accuracy,
            100.0 * rnd.test_accuracy,
            100.0 * shuf.test_accuracy,
            start.elapsed().as_secs_f64()
        );
        gaps.push(pre.test_accuracy - rnd.test_accuracy);
        shuffled.push(shuf.test_accuracy);
        lines.push(format!("{:.1}/{:.1}", 100.0 * pre.test_accuracy, 100.0 * rnd.test_accuracy));
    }
    let gap = 100.0 * gaps.iter().sum::<f64>() / 3.0;
    let shuf = 100.0 * shuffled.iter().sum::<f64>() / 3.0;
    let summary = format!("mean gap {gap:+.1} points, shuffled control {shuf:.1}% (pretrained/random per seed: {})", lines.join(", "));
    ensure(gap >= 10.0, || format!("{summary}; gap below 10 points"))?;
    ensure((shuf - 25.0).abs() <= 7.0, || format!("{summary}; control outside 25 ± 7"))?;
    within(start, Duration::from_secs(1800))?;
    Ok(summary)
}

fn ablation_wiring() -> Outcome {
    let schema: serde_json::Value = serde_json::from_str(include_str!("../schema/metrics.schema.json")).map_err(|e| e.to_string())?;
    let schema = jsonschema::JSONSchema::compile(&schema).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for k in 1..=4usize {
        for p_mask in [0.2, 0.0] {
            let mut cfg = CtpConfig::default();
            cfg.data.k = k;
            cfg.data.p_mask = p_mask;
            cfg.data.num_clips = 8;
            cfg.train.batch_size = 8;
            cfg.train.epochs = 15;
            cfg.train.milestones = vec![];
            cfg.train.checkpoint_every = 0;
            let name = format!("k{k}-mrm{}", if p_mask > 0.0 { "on" } else { "off" });
            let cfg_path = dir.path().join(format!("{name}.toml"));
            std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| e.to_string())?;
            let out = dir.path().join(&name);
            ctp(&["pretrain", "--config", &cfg_path.display().to_string(), "--out", &out.display().to_string()])?;
            let value: serde_json::Value =
                serde_json::from_slice(&std::fs::read(out.join(METRICS)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            if let Err(errors) = schema.validate(&value) {
                let msgs: Vec<String> = errors.map(|e| e.to_string()).collect();
                return Err(format!("{name}: metrics violate the schema: {msgs:?}"));
            }
            let m: Metrics = serde_json::from_value(value).map_err(|e| e.to_string())?;
            ensure(m.metrics["k"] == k as f64 && m.metrics["p_mask"] == p_mask, || format!("{name}: wrong axes recorded"))?;
            ensure(m.metrics["finished"] == 1.0 && m.metrics["loss"].is_finite(), || format!("{name}: incomplete run"))?;
            rows.push((name, m));
        }
    }
    let hashes: std::collections::BTreeSet<&str> = rows.iter().map(|(_, m)| m.config_hash.as_str()).collect();
    ensure(hashes.len() == rows.len(), || "ablation configs are not distinct".into())?;
    let keys: Vec<Vec<&String>> = rows.iter().map(|(_, m)| m.metrics.keys().collect()).collect();
    ensure(keys.windows(2).all(|w| w[0] == w[1]), || "metrics files carry different keys".into())?;
    let losses: std::collections::BTreeSet<u64> = rows.iter().map(|(_, m)| m.metrics["loss"].to_bits()).collect();
    ensure(losses.len() == rows.len(), || "runs are not differentiated".into())?;
    for (name, m) in &rows {
        println!("    {name:10} loss {:.4}  train IoU {:.3}", m.metrics["loss"], m.metrics["train_iou"]);
    }
    Ok(format!("{} runs (K = 1..4 x MRM on/off) emitted comparable metrics", rows.len()))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "geometry round trip", geometry_round_trip),
        (2, "gradient oracle", gradient_oracle),
        (3, "trajectory audit", trajectory_audit),
        (4, "MRM statistics", mrm_statistics),
        (5, "determinism", determinism),
        (6, "overfit smoke test", overfit),
        (7, "pooling oracle", pooling_oracle),
        (8, "retrieval oracle", retrieval_oracle),
        (9, "transfer benefit", transfer_benefit),
        (10, "ablation wiring", ablation_wiring),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:2} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
