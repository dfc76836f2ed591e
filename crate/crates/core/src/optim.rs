//! SGD with momentum and decoupled-from-bias weight decay.
//!
//! Update per parameter element:
//!
//! ```text
//! g ← grad + wd·w      (wd only for parameters with `decay = true`)
//! v ← μ·v + g
//! w ← w − lr·v
//! ```
//!
//! Parameters with `decay = false` (every bias) form the exclusion list;
//! [`Sgd::decay_exclusions`] reports it.

use crate::error::{CtpError, Result};
use crate::nn::{Param, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<R> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One velocity buffer per parameter, in parameter order.
    pub velocity: Vec<Vec<R>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(params: &[&Param<R>], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![R::zero(); p.len()]).collect(),
        }
    }

    /// Names of parameters that receive no weight decay.
    pub fn decay_exclusions(params: &[&Param<R>]) -> Vec<String> {
        params.iter().filter(|p| !p.decay).map(|p| p.name.clone()).collect()
    }

    pub fn step(&mut self, params: Vec<&mut Param<R>>, lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(CtpError::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let mu = R::from_f64(self.momentum);
        let lr = R::from_f64(lr);
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if v.len() != p.len() {
                return Err(CtpError::invalid(format!("velocity size mismatch for {}", p.name)));
            }
            let wd = R::from_f64(if p.decay { self.weight_decay } else { 0.0 });
            for ((w, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let d = *g + wd * *w;
                *vi = mu * *vi + d;
                *w = *w - lr * *vi;
            }
        }
        Ok(())
    }
}
