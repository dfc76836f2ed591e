//! Pretraining loop: shuffled batches of synthetic clips, SGD with momentum
//! and a step learning-rate schedule, JSON-lines logging and resumable
//! checkpoints.
//!
//! Each epoch's shuffle and each clip's synthesis are keyed by the seed and
//! the epoch, so a run resumed from an end-of-epoch checkpoint replays the
//! uninterrupted run exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::compositor::SyntheticClip;
use crate::config::{CtpConfig, TrainConfig};
use crate::dataset::ClipProvider;
use crate::error::{CtpError, Result};
use crate::geometry::{iou, Sigmas};
use crate::io::write_atomic;
use crate::model::{decode_targets, CtpModel};
use crate::objective::{target_loss_grad, LossAccumulator, LossReport};
use crate::optim::Sgd;
use crate::seeding::{self, tag};

/// `base_lr · decay^(milestones ≤ epoch)`.
pub fn step_lr(epoch: usize, epochs: usize, base_lr: f64, decay: f64, milestones: &[usize]) -> Result<f64> {
    if epoch >= epochs {
        return Err(CtpError::invalid(format!("epoch {epoch} outside schedule of {epochs} epochs")));
    }
    let passed = milestones.iter().filter(|m| **m <= epoch).count();
    Ok(base_lr * decay.powi(passed as i32))
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    step_lr(epoch, cfg.epochs, cfg.base_lr, cfg.lr_decay, &cfg.milestones)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
    pub lr: f64,
}

impl StepLog {
    fn new(step: u64, epoch: usize, r: &LossReport, lr: f64) -> Self {
        let [dx, dy, dw, dh] = r.per_component;
        Self {
            step,
            epoch,
            total: r.total,
            dx,
            dy,
            dw,
            dh,
            lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Mean `[dx, dy, dw, dh]` over the epoch's steps.
    pub mean_components: [f64; 4],
}

/// Contents of the diagnostic file written when the loss stops being finite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NanDump {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub batch: Vec<String>,
    pub detail: String,
}

pub struct Trainer {
    pub cfg: CtpConfig,
    pub model: CtpModel<f32>,
    pub opt: Sgd<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    data: ClipProvider,
    pool: rayon::ThreadPool,
    /// Batch that produced the last numeric failure.
    pub last_failure: Option<NanDump>,
}

impl Trainer {
    pub fn new(cfg: &CtpConfig, data: ClipProvider, pool: rayon::ThreadPool) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(CtpError::data("training dataset is empty"));
        }
        let e = &cfg.model.encoder;
        if let Some(dims) = data.clip_dims() {
            if dims != (e.input_t, e.input_h, e.input_w) {
                return Err(CtpError::config(format!(
                    "dataset clips are {dims:?} (T, H, W) but the encoder expects ({}, {}, {})",
                    e.input_t, e.input_h, e.input_w
                )));
            }
        }
        let mut rng = seeding::rng_for(cfg.seed, &[tag::INIT]);
        let model = CtpModel::new(&cfg.model, &mut rng)?;
        let opt = Sgd::new(&model.params(), cfg.train.momentum, cfg.train.weight_decay);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            epoch: 0,
            step: 0,
            data,
            pool,
            last_failure: None,
        })
    }

    /// Continue from a checkpoint written by a run with the same config.
    pub fn resume(cfg: &CtpConfig, data: ClipProvider, pool: rayon::ThreadPool, ckpt: &Checkpoint, force: bool) -> Result<Self> {
        ckpt.check_config(cfg, force)?;
        let mut t = Self::new(cfg, data, pool)?;
        ckpt.restore_model(&mut t.model)?;
        ckpt.restore_optimizer(&t.model, &mut t.opt)?;
        t.epoch = ckpt.rng.next_epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.model, &self.opt, self.epoch, self.step)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.train.epochs
    }

    /// Order in which clips are visited during `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut seeding::rng_for(self.cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        order
    }

    /// One SGD step on `clips`. Returns the batch loss before the update.
    pub fn train_step(&mut self, clips: &[SyntheticClip], lr: f64) -> Result<LossReport> {
        let sigmas = self.cfg.sigmas;
        let n_traj: usize = clips.iter().map(|c| c.trajectories.len()).sum();
        if n_traj == 0 {
            return Err(CtpError::data("batch has no trajectories"));
        }
        let scale = 1.0 / n_traj as f64;
        let t = self.cfg.model.head.out_t;
        self.model.zero_grad();
        let mut acc = LossAccumulator::default();
        for clip in clips {
            let x = self.model.normalize(clip.dims(), &clip.frames);
            let queries = clip.queries();
            let (targets, trace) = self.model.forward_train(&x, &queries)?;
            if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
                return Err(CtpError::Numeric(format!("non-finite prediction at output {i} for clip {}", clip.source_id)));
            }
            let mut grad = vec![0f32; targets.len()];
            for (k, traj) in clip.trajectories.iter().enumerate() {
                let span = k * t * 4..(k + 1) * t * 4;
                let tk: Vec<f64> = targets[span.clone()].iter().map(|v| *v as f64).collect();
                let (loss, g) = target_loss_grad(&queries[k], &traj.boxes, &tk, &sigmas)
                    .map_err(|e| CtpError::Numeric(format!("loss failed for clip {}: {e}", clip.source_id)))?;
                acc.add(&loss);
                for (dst, v) in grad[span].iter_mut().zip(g) {
                    *dst = (v * scale) as f32;
                }
            }
            self.model.backward(&trace, &grad);
        }
        let report = acc.report()?;
        if !report.total.is_finite() {
            return Err(CtpError::Numeric(format!("loss is {}", report.total)));
        }
        if let Some(p) = self.model.params().iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(CtpError::Numeric(format!("non-finite gradient in {}", p.name)));
        }
        self.opt.step(self.model.params_mut(), lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Run the next epoch, reporting each step to `log`.
    pub fn train_epoch(&mut self, log: &mut dyn FnMut(&StepLog) -> Result<()>) -> Result<EpochSummary> {
        if self.is_finished() {
            return Err(CtpError::invalid("training already finished"));
        }
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.cfg.train)?;
        let order = self.epoch_order(epoch);
        let mut total = 0.0;
        let mut comps = [0.0; 4];
        let mut steps = 0;
        for batch in order.chunks(self.cfg.train.batch_size) {
            let data = &self.data;
            let clips: Result<Vec<SyntheticClip>> =
                self.pool.install(|| batch.par_iter().map(|i| data.clip(*i, epoch)).collect());
            let clips = clips?;
            match self.train_step(&clips, lr) {
                Ok(r) => {
                    total += r.total;
                    comps.iter_mut().zip(r.per_component).for_each(|(c, v)| *c += v);
                    steps += 1;
                    log(&StepLog::new(self.step, epoch, &r, lr))?;
                }
                Err(CtpError::Numeric(detail)) => {
                    let ids: Vec<String> = batch.iter().map(|i| self.data.clip_id(*i, epoch)).collect();
                    let msg = format!("{detail}; step {}, epoch {epoch}, batch [{}]", self.step + 1, ids.join(", "));
                    self.last_failure = Some(NanDump {
                        step: self.step + 1,
                        epoch,
                        lr,
                        batch: ids,
                        detail,
                    });
                    return Err(CtpError::Numeric(msg));
                }
                Err(e) => return Err(e),
            }
        }
        self.epoch += 1;
        Ok(EpochSummary {
            epoch,
            steps,
            mean_loss: total / steps.max(1) as f64,
            mean_components: comps.map(|c| c / steps.max(1) as f64),
        })
    }
}

/// Mean IoU between decoded predictions and ground truth over every frame
/// of every trajectory.
pub fn evaluate_iou(model: &CtpModel<f32>, clips: &[SyntheticClip], sigmas: &Sigmas) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for clip in clips {
        let x = model.normalize(clip.dims(), &clip.frames);
        let queries = clip.queries();
        let targets = model.predict(&x, &queries)?;
        let pred = decode_targets(&targets, &queries, model.spec.head.out_t, sigmas)?;
        for (traj, p) in clip.trajectories.iter().zip(&pred) {
            for (g, b) in traj.boxes.iter().zip(p) {
                sum += iou(g, b);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(CtpError::invalid("no frames to evaluate"));
    }
    Ok(sum / n as f64)
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt-epoch{epoch:04}.ctpk"))
}

/// Options for [`pretrain`].
#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub resume: Option<PathBuf>,
    /// Accept a resume checkpoint written under a different config.
    pub force: bool,
    /// Stop after this many epochs of this invocation (for tests and
    /// interrupted runs); `None` runs to the end of the schedule.
    pub max_epochs: Option<usize>,
}

/// Result of [`pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Last checkpoint written.
    pub checkpoint: PathBuf,
    pub epoch: usize,
    pub step: u64,
    pub finished: bool,
    /// Summary of the last epoch run by this invocation.
    pub last_epoch: Option<EpochSummary>,
    pub model: CtpModel<f32>,
}

/// Train, writing `train_log.jsonl`, periodic checkpoints and `final.ctpk`
/// into `run_dir`. Log lines are also written to `out`.
pub fn pretrain(
    cfg: &CtpConfig,
    data: ClipProvider,
    pool: rayon::ThreadPool,
    run_dir: &Path,
    opts: &PretrainOptions,
    out: &mut dyn Write,
) -> Result<PretrainOutcome> {
    std::fs::create_dir_all(run_dir).map_err(|e| CtpError::io(run_dir, e))?;
    let mut trainer = match &opts.resume {
        Some(p) => Trainer::resume(cfg, data, pool, &load_checkpoint(p)?, opts.force)?,
        None => Trainer::new(cfg, data, pool)?,
    };
    let log_path = run_dir.join("train_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CtpError::io(&log_path, e))?;
    let every = cfg.train.checkpoint_every;
    let mut last = None;
    let mut last_epoch = None;
    let mut ran = 0;
    while !trainer.is_finished() && opts.max_epochs.map_or(true, |m| ran < m) {
        let result = trainer.train_epoch(&mut |s| {
            let line = serde_json::to_string(s).expect("log line serializes");
            writeln!(log_file, "{line}").map_err(|e| CtpError::io(&log_path, e))?;
            writeln!(out, "{line}").map_err(|e| CtpError::io("<stdout>", e))
        });
        match result {
            Ok(s) => last_epoch = Some(s),
            Err(e) => {
                if let Some(dump) = &trainer.last_failure {
                    let json = serde_json::to_vec_pretty(dump).expect("dump serializes");
                    write_atomic(&run_dir.join("nan_dump.json"), &json)?;
                }
                return Err(e);
            }
        }
        ran += 1;
        if every > 0 && trainer.epoch % every == 0 && !trainer.is_finished() {
            let p = checkpoint_path(run_dir, trainer.epoch);
            save_checkpoint(&p, &trainer.checkpoint())?;
            last = Some(p);
        }
    }
    if trainer.is_finished() {
        let p = run_dir.join("final.ctpk");
        save_checkpoint(&p, &trainer.checkpoint())?;
        last = Some(p);
    } else if last.as_ref() != Some(&checkpoint_path(run_dir, trainer.epoch)) {
        let p = checkpoint_path(run_dir, trainer.epoch);
        save_checkpoint(&p, &trainer.checkpoint())?;
        last = Some(p);
    }
    Ok(PretrainOutcome {
        checkpoint: last.expect("at least one checkpoint written"),
        epoch: trainer.epoch,
        step: trainer.step,
        finished: trainer.is_finished(),
        last_epoch,
        model: trainer.model,
    })
}
