//! Overfits the default model on a handful of fixed synthetic clips and
//! prints loss and IoU as training progresses.
//!
//! Usage: `cargo run --release --example overfit -- [lr] [steps] [clips]`

use std::time::Instant;

use ctp_core::config::CtpConfig;
use ctp_core::dataset::{worker_pool, ClipProvider};
use ctp_core::trainer::{evaluate_iou, Trainer};

fn main() -> ctp_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args.first().map_or(0.01, |s| s.parse().unwrap());
    let steps: usize = args.get(1).map_or(2000, |s| s.parse().unwrap());
    let n: usize = args.get(2).map_or(8, |s| s.parse().unwrap());
    let mut cfg = CtpConfig::default();
    cfg.seed = 1;
    cfg.data.num_clips = n;
    cfg.train.epochs = steps;
    cfg.train.milestones = vec![];
    cfg.train.base_lr = lr;
    cfg.train.batch_size = n;
    let source = ClipProvider::synthesizing(&cfg)?;
    let clips: Vec<_> = (0..n).map(|i| source.clip(i, 0)).collect::<Result<_, _>>()?;
    let mut tr = Trainer::new(&cfg, ClipProvider::fixed(clips.clone()), worker_pool(Some(1))?)?;
    let start = Instant::now();
    let mut first = None;
    while !tr.is_finished() {
        let s = tr.train_epoch(&mut |_| Ok(()))?;
        let l0 = *first.get_or_insert(s.mean_loss);
        if s.epoch % 50 == 0 || tr.is_finished() {
            let iou = evaluate_iou(&tr.model, &clips, &cfg.sigmas)?;
            println!(
                "step {:5} loss {:.6} ratio {:.2e} iou {:.4} t {:.0}s",
                tr.step,
                s.mean_loss,
                s.mean_loss / l0,
                iou,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
