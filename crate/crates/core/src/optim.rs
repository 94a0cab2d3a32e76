//! AdamW / SGD over flat parameter slices, plus global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::model::math::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    /// One bias-corrected step with decoupled weight decay.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - self.beta1.powi(self.t));
        let bc2 = T::lit(1.0 - self.beta2.powi(self.t));
        let lr_t = T::lit(lr);
        let eps = T::lit(self.eps);
        let wd = T::lit(self.weight_decay);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }
}

pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], lr: f64) {
    let lr = T::lit(lr);
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm and whether clipping happened.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-12));
        grads.iter_mut().for_each(|g| *g *= s);
        (norm, true)
    } else {
        (norm, false)
    }
}
