//! Finetunes a randomly initialized encoder on the toy benchmark to check
//! that motion classes are learnable through globally pooled features.
//!
//! Usage: `cargo run --release --example toy_supervised -- [epochs] [lr] [batch]`

use std::time::Instant;

use ctp_core::config::{CtpConfig, ProbeMode};
use ctp_core::model::CtpModel;
use ctp_core::seeding::{self, tag};
use ctp_core::transfer::{linear_probe, make_toy_benchmark};

fn main() -> ctp_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(10, |s| s.parse().unwrap());
    let lr: f64 = args.get(1).map_or(0.01, |s| s.parse().unwrap());
    let batch: usize = args.get(2).map_or(16, |s| s.parse().unwrap());
    let mut cfg = CtpConfig::default();
    cfg.probe.mode = ProbeMode::Finetune;
    cfg.probe.epochs = epochs;
    cfg.probe.milestones = vec![];
    cfg.probe.base_lr = lr;
    cfg.probe.batch_size = batch;
    let start = Instant::now();
    let bench = make_toy_benchmark(0, &cfg.toy)?;
    let model = CtpModel::<f32>::new(&cfg.model, &mut seeding::rng_for(0, &[tag::INIT]))?;
    let r = linear_probe(&model.encoder, &cfg.model.normalization, &bench, &cfg.probe, 0)?;
    println!("{r:?} t {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
