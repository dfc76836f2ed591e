//! Training loss: per-frame, per-component Smooth-L1 distances between
//! decoded predictions and ground-truth boxes.
//!
//! Reduction: the four components are summed within a frame, frames are
//! averaged within a trajectory, trajectories are averaged over the batch.
//! Masked frames are supervised like any other frame.

use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::geometry::{box_distance, decode_box, smooth_l1_grad, BBox, Sigmas, TargetVec};
use crate::trajsynth::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Means of `(dx, dy, dw, dh)` over frames and trajectories.
    pub per_component: [f64; 4],
    /// Mean of the summed components at each frame, over trajectories.
    pub per_frame: Vec<f64>,
}

/// Loss contribution of a single trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLoss {
    pub total: f64,
    pub per_component: [f64; 4],
    pub per_frame: Vec<f64>,
}

/// Mean over frames of the summed box distances.
pub fn trajectory_distance(gt: &Trajectory, pred: &[BBox], s: &Sigmas) -> Result<f64> {
    Ok(trajectory_loss(&gt.boxes, pred, s)?.total)
}

fn trajectory_loss(gt: &[BBox], pred: &[BBox], s: &Sigmas) -> Result<TrajectoryLoss> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(CtpError::invalid(format!(
            "trajectory length mismatch: {} ground-truth vs {} predicted boxes",
            gt.len(),
            pred.len()
        )));
    }
    let n = gt.len() as f64;
    let mut per_component = [0.0; 4];
    let mut per_frame = Vec::with_capacity(gt.len());
    for (g, p) in gt.iter().zip(pred) {
        let d = box_distance(g, p, s)?;
        per_frame.push(d.iter().sum());
        for (acc, v) in per_component.iter_mut().zip(d) {
            *acc += v / n;
        }
    }
    Ok(TrajectoryLoss {
        total: per_frame.iter().sum::<f64>() / n,
        per_component,
        per_frame,
    })
}

/// Mean trajectory distance over every `(ground truth, prediction)` pair.
pub fn batch_loss(batch: &[(&Trajectory, &[BBox])], s: &Sigmas) -> Result<LossReport> {
    let mut acc = LossAccumulator::default();
    for (gt, pred) in batch {
        acc.add(&trajectory_loss(&gt.boxes, pred, s)?);
    }
    acc.report()
}

/// Loss and its gradient with respect to the raw `T × 4` targets of one
/// query. Decoding is `cx = q.cx + σx·tx`, `w = q.w·exp(σw·tw)`, so each
/// residual is `r = t_gt − t` in target space and `∂L(r)/∂t = −L′(r)`.
pub fn target_loss_grad(query: &BBox, gt: &[BBox], targets: &[f64], s: &Sigmas) -> Result<(TrajectoryLoss, Vec<f64>)> {
    if targets.len() != gt.len() * 4 {
        return Err(CtpError::invalid(format!(
            "expected {} targets for {} frames, got {}",
            gt.len() * 4,
            gt.len(),
            targets.len()
        )));
    }
    let n = gt.len() as f64;
    let mut pred = Vec::with_capacity(gt.len());
    let mut grad = vec![0.0; targets.len()];
    for (i, g) in gt.iter().enumerate() {
        let t = TargetVec::new(targets[4 * i], targets[4 * i + 1], targets[4 * i + 2], targets[4 * i + 3]);
        let p = decode_box(query, &t, s)?;
        let residual = [
            (g.cx - p.cx) / s.sx,
            (g.cy - p.cy) / s.sy,
            (g.w / p.w).ln() / s.sw,
            (g.h / p.h).ln() / s.sh,
        ];
        for (c, r) in residual.iter().enumerate() {
            grad[4 * i + c] = -smooth_l1_grad(*r) / n;
        }
        pred.push(p);
    }
    let loss = trajectory_loss(gt, &pred, s)?;
    Ok((loss, grad))
}

/// Running mean of trajectory losses with a fixed summation order.
#[derive(Debug, Clone, Default)]
pub struct LossAccumulator {
    count: usize,
    total: f64,
    per_component: [f64; 4],
    per_frame: Vec<f64>,
}

impl LossAccumulator {
    pub fn add(&mut self, l: &TrajectoryLoss) {
        if self.per_frame.is_empty() {
            self.per_frame = vec![0.0; l.per_frame.len()];
        }
        self.count += 1;
        self.total += l.total;
        for (a, v) in self.per_component.iter_mut().zip(l.per_component) {
            *a += v;
        }
        for (a, v) in self.per_frame.iter_mut().zip(&l.per_frame) {
            *a += v;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn report(&self) -> Result<LossReport> {
        if self.count == 0 {
            return Err(CtpError::invalid("empty batch"));
        }
        let n = self.count as f64;
        Ok(LossReport {
            total: self.total / n,
            per_component: self.per_component.map(|v| v / n),
            per_frame: self.per_frame.iter().map(|v| v / n).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::encode_targets;
    use approx::assert_abs_diff_eq;

    fn traj(boxes: Vec<BBox>) -> Trajectory {
        let n = boxes.len();
        Trajectory {
            len: n,
            keyframe_indices: vec![0, n - 1],
            visible: vec![true; n],
            boxes,
        }
    }

    fn line(n: usize) -> Vec<BBox> {
        (0..n)
            .map(|i| BBox::new(0.3 + 0.01 * i as f64, 0.5, 0.2 * (0.01 * i as f64).exp(), 0.25))
            .collect()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let s = Sigmas::default();
        let gt = traj(line(16));
        assert_eq!(trajectory_distance(&gt, &gt.boxes, &s).unwrap(), 0.0);
        let r = batch_loss(&[(&gt, &gt.boxes[..])], &s).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn one_frame_off_center() {
        let s = Sigmas::default();
        let gt = traj(line(16));
        let mut pred = gt.boxes.clone();
        pred[5].cx -= 0.5 * s.sx;
        assert_abs_diff_eq!(trajectory_distance(&gt, &pred, &s).unwrap(), 0.125 / 16.0, epsilon = 1e-12);
        pred[5].cx = gt.boxes[5].cx - 0.4 * s.sx;
        assert_abs_diff_eq!(trajectory_distance(&gt, &pred, &s).unwrap(), 0.08 / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn center_terms_symmetric_size_terms_not() {
        let s = Sigmas::default();
        let a = BBox::new(0.3, 0.4, 0.2, 0.2);
        let b = BBox::new(0.5, 0.45, 0.2, 0.2);
        let ab = trajectory_distance(&traj(vec![a, a]), &[b, b], &s).unwrap();
        let ba = trajectory_distance(&traj(vec![b, b]), &[a, a], &s).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-15);
        // size terms live in log space: the same absolute change of width
        // costs more when shrinking than when growing
        let up = box_distance(&BBox::new(0.5, 0.5, 0.25, 0.2), &BBox::new(0.5, 0.5, 0.2, 0.2), &s).unwrap()[2];
        let down = box_distance(&BBox::new(0.5, 0.5, 0.15, 0.2), &BBox::new(0.5, 0.5, 0.2, 0.2), &s).unwrap()[2];
        assert!((up - down).abs() > 1e-3);
    }

    #[test]
    fn length_mismatch_and_empty_batch() {
        let s = Sigmas::default();
        let gt = traj(line(4));
        assert!(trajectory_distance(&gt, &gt.boxes[..3], &s).is_err());
        assert!(batch_loss(&[], &s).is_err());
    }

    #[test]
    fn batch_is_mean_of_trajectories() {
        let s = Sigmas::default();
        let g1 = traj(line(8));
        let g2 = traj(line(8).into_iter().rev().collect());
        let mut p1 = g1.boxes.clone();
        p1[2].cx += 0.1;
        let mut p2 = g2.boxes.clone();
        p2[7].w *= 1.3;
        let a = trajectory_distance(&g1, &p1, &s).unwrap();
        let b = trajectory_distance(&g2, &p2, &s).unwrap();
        let r = batch_loss(&[(&g1, &p1[..]), (&g2, &p2[..])], &s).unwrap();
        assert_abs_diff_eq!(r.total, (a + b) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.total, r.per_component.iter().sum::<f64>(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.total, r.per_frame.iter().sum::<f64>() / 8.0, epsilon = 1e-12);
        let swapped = batch_loss(&[(&g2, &p2[..]), (&g1, &p1[..])], &s).unwrap();
        assert_abs_diff_eq!(r.total, swapped.total, epsilon = 1e-15);
    }

    #[test]
    fn target_gradient_matches_finite_differences() {
        let s = Sigmas::default();
        let gt = line(4);
        let q = BBox::new(0.32, 0.52, 0.21, 0.24);
        let targets: Vec<f64> = (0..16).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13).collect();
        let (_, grad) = target_loss_grad(&q, &gt, &targets, &s).unwrap();
        let h = 1e-6;
        for i in 0..targets.len() {
            let mut tp = targets.clone();
            tp[i] += h;
            let mut tm = targets.clone();
            tm[i] -= h;
            let fp = target_loss_grad(&q, &gt, &tp, &s).unwrap().0.total;
            let fm = target_loss_grad(&q, &gt, &tm, &s).unwrap().0.total;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(grad[i].abs()).max(1e-6), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn loss_decreases_along_path_to_ground_truth() {
        let s = Sigmas::default();
        let gt = line(8);
        let q = gt[0];
        let star: Vec<f64> = gt.iter().flat_map(|g| encode_targets(&q, g, &s).unwrap().to_array()).collect();
        let mut last = f64::INFINITY;
        for step in 0..=50 {
            let a = step as f64 / 50.0;
            let t: Vec<f64> = star.iter().map(|v| a * v).collect();
            let l = target_loss_grad(&q, &gt, &t, &s).unwrap().0.total;
            assert!(l <= last + 1e-15);
            last = l;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn sigma_scaling_leaves_size_terms_unchanged() {
        let gt = BBox::new(0.5, 0.5, 0.3, 0.2);
        let pred = BBox::new(0.5, 0.5, 0.2, 0.2);
        let s = Sigmas::default();
        let d1 = box_distance(&gt, &pred, &s).unwrap()[2];
        // doubling σw with the log error doubled leaves the term unchanged
        let s2 = Sigmas { sw: 2.0 * s.sw, ..s };
        let gt2 = BBox::new(0.5, 0.5, pred.w * (2.0 * (gt.w / pred.w).ln()).exp(), 0.2);
        let d2 = box_distance(&gt2, &pred, &s2).unwrap()[2];
        assert_abs_diff_eq!(d1, d2, epsilon = 1e-12);
    }
}
