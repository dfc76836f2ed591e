use proptest::prelude::*;

use ctp_core::compositor::{procedural_raw_clip, synthesize_training_clip};
use ctp_core::geometry::{box_distance, decode_box, encode_targets, iou, smooth_l1, BBox, Sigmas};
use ctp_core::model::pool_region;
use ctp_core::nn::Volume;
use ctp_core::trajsynth::{sample_trajectory, TrajectoryConstraints};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.05f64..0.95, 0.05f64..0.95, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

proptest! {
    #[test]
    fn decode_inverts_encode(q in bbox(), g in bbox()) {
        let s = Sigmas::default();
        let back = decode_box(&q, &encode_targets(&q, &g, &s).unwrap(), &s).unwrap();
        for (a, b) in back.to_array().iter().zip(g.to_array()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_is_zero_only_on_the_target(g in bbox(), p in bbox()) {
        let s = Sigmas::default();
        prop_assert_eq!(box_distance(&g, &g, &s).unwrap(), [0.0; 4]);
        let d = box_distance(&g, &p, &s).unwrap();
        prop_assert!(d.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn smooth_l1_is_even_and_below_abs(x in -50.0f64..50.0) {
        prop_assert_eq!(smooth_l1(x), smooth_l1(-x));
        prop_assert!(smooth_l1(x) <= x.abs());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_trajectories_are_valid(seed in any::<u64>(), len in 2usize..24) {
        let c = TrajectoryConstraints::default();
        let t = sample_trajectory(&mut ChaCha8Rng::seed_from_u64(seed), len, &c).unwrap();
        prop_assert_eq!(t.boxes.len(), len);
        prop_assert!(t.violations(&c).is_empty());
    }

    #[test]
    fn pooling_is_linear_in_the_map(seed in any::<u64>(), b in bbox(), p in 1usize..4, a in -2.0f64..2.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6 * 5 * 2;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + v).collect();
        let pool = |d: Vec<f64>| pool_region(&Volume::from_vec([1, 6, 5, 2], d), &b, p).data;
        let (px, py, pm) = (pool(x), pool(y), pool(mixed));
        for i in 0..pm.len() {
            prop_assert!((pm[i] - (a * px[i] + py[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesized_clips_keep_frame_zero_visible(seed in 0u64..1000, k in 1usize..4) {
        let raw = procedural_raw_clip(seed, 0, 8, 32, 32, [1, 3]).unwrap();
        let clip = synthesize_training_clip(seed, &raw, k, &TrajectoryConstraints::default(), 0.9).unwrap();
        prop_assert_eq!(clip.trajectories.len(), k);
        for t in &clip.trajectories {
            prop_assert!(t.visible[0]);
        }
    }
}
