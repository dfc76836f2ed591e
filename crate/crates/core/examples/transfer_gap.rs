//! Pretrains with a given config, then compares frozen linear probes of
//! the pretrained and randomly initialized encoders on the toy motion
//! benchmark, plus a label-shuffled control.
//!
//! Usage: `cargo run --release --example transfer_gap -- <config.toml> [seed]`

use std::time::Instant;

use ctp_core::config::CtpConfig;
use ctp_core::dataset::{worker_pool, ClipProvider};
use ctp_core::model::CtpModel;
use ctp_core::seeding::{self, tag};
use ctp_core::trainer::Trainer;
use ctp_core::transfer::{linear_probe, make_toy_benchmark};

fn main() -> ctp_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = CtpConfig::load(std::path::Path::new(&args[0]))?;
    if let Some(s) = args.get(1) {
        cfg.seed = s.parse().unwrap();
    }
    let seed = cfg.seed;
    let start = Instant::now();
    let mut tr = Trainer::new(&cfg, ClipProvider::synthesizing(&cfg)?, worker_pool(Some(1))?)?;
    while !tr.is_finished() {
        let mut comp = [0.0; 4];
        let s = tr.train_epoch(&mut |l| {
            for (c, v) in comp.iter_mut().zip([l.dx, l.dy, l.dw, l.dh]) {
                *c += v;
            }
            Ok(())
        })?;
        let comp = comp.map(|c| c / s.steps as f64);
        println!(
            "epoch {} step {} loss {:.4} dx {:.4} dy {:.4} dw {:.4} dh {:.4} t {:.0}s",
            s.epoch,
            tr.step,
            s.mean_loss,
            comp[0],
            comp[1],
            comp[2],
            comp[3],
            start.elapsed().as_secs_f64()
        );
    }
    let bench = make_toy_benchmark(seed, &cfg.toy)?;
    let norm = cfg.model.normalization;
    let random = CtpModel::<f32>::new(&cfg.model, &mut seeding::rng_for(seed, &[tag::INIT]))?;
    let pre = linear_probe(&tr.model.encoder, &norm, &bench, &cfg.probe, seed)?;
    println!("pretrained {:?} t {:.0}s", pre, start.elapsed().as_secs_f64());
    let rnd = linear_probe(&random.encoder, &norm, &bench, &cfg.probe, seed)?;
    println!("random     {:?} t {:.0}s", rnd, start.elapsed().as_secs_f64());
    let shuf = linear_probe(&tr.model.encoder, &norm, &bench.with_shuffled_train_labels(seed), &cfg.probe, seed)?;
    println!("shuffled   {:?} t {:.0}s", shuf, start.elapsed().as_secs_f64());
    Ok(())
}
