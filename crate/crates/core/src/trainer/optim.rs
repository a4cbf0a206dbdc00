use std::collections::BTreeMap;

use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

/// Adam with decoupled weight decay on matrices, after clipping the global
/// gradient norm. Moments exist only for tensors that have received a
/// gradient, so an untouched tensor never moves.
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, betas: [f64; 2], weight_decay: f64, clip: f64) -> Self {
        Self {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            eps: 1e-8,
            weight_decay,
            clip,
            state: BTreeMap::new(),
        }
    }

    /// Global L2 norm, accumulated in name order.
    pub fn grad_norm(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
        grads
            .values()
            .flat_map(|g| g.data().iter())
            .fold(0.0, |a, v| a + v.as_f64() * v.as_f64())
            .sqrt()
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &BTreeMap<String, Tensor<T>>) {
        let norm = Self::grad_norm(grads);
        let scale = if norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let scale = T::of(scale);
        model.visit_mut(|name, p| {
            let Some(g) = grads.get(name) else { return };
            let st = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![T::zero(); p.numel()],
                    v: vec![T::zero(); p.numel()],
                    t: 0,
                });
            st.t += 1;
            let c1 = T::of(1.0 - self.beta1.powi(st.t));
            let c2 = T::of(1.0 - self.beta2.powi(st.t));
            let lr = T::of(self.lr);
            let decay = if p.rank() == 2 {
                T::of(self.lr * self.weight_decay)
            } else {
                T::zero()
            };
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let gi = gi * scale;
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let mh = *m / c1;
                let vh = *v / c2;
                *w = *w - decay * *w - lr * mh / (vh.sqrt() + eps);
            }
        });
    }
}
