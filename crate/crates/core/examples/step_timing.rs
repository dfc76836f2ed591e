//! Times one forward/backward pass of the default model on a batch of clips.

use std::time::Instant;

use ctp_core::geometry::BBox;
use ctp_core::model::{CtpModel, ModelSpec};
use ctp_core::nn::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let spec = ModelSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = CtpModel::<f32>::new(&spec, &mut rng).unwrap();
    let dims = [8, 64, 64, 3];
    let clip = Volume::from_vec(dims, (0..dims.iter().product::<usize>()).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    let queries = [BBox::new(0.3, 0.3, 0.2, 0.2), BBox::new(0.6, 0.6, 0.3, 0.2), BBox::new(0.5, 0.4, 0.2, 0.4)];
    println!("params: {}", model.param_count());
    let batch = 8;
    let start = Instant::now();
    let v = model.encoder.encode(&clip).unwrap();
    println!("encode only: {:?} -> {:?}", start.elapsed(), v.dims);
    let start = Instant::now();
    for _ in 0..batch {
        let (targets, trace) = model.forward_train(&clip, &queries).unwrap();
        let grad = vec![0.01f32; targets.len()];
        model.backward(&trace, &grad);
    }
    println!("batch of {batch}: {:?}", start.elapsed());
}
