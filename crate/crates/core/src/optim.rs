//! Optimizers acting on a [`ParamStore`] with gradients from a graph.

use alloc::vec::Vec;

use crate::graph::ParamGrads;
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Adam with decoupled weight decay. Decay applies to tensors of rank ≥ 2
/// (weights), not to biases.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| alloc::vec![T::zero(); store.value(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - num_traits::Float::powi(self.beta1, self.step as i32);
        let bc2 = 1.0 - num_traits::Float::powi(self.beta2, self.step as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let decay = if store.value(id).shape().len() >= 2 {
                T::from_f64(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        if self.velocity.len() != store.len() {
            self.velocity = store.ids().map(|id| alloc::vec![T::zero(); store.value(id).numel()]).collect();
        }
        let mu = T::from_f64(self.momentum);
        let lr_t = T::from_f64(lr);
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let wd = if store.value(id).shape().len() >= 2 {
                T::from_f64(self.weight_decay)
            } else {
                T::zero()
            };
            let vel = &mut self.velocity[id.index()];
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                vel[i] = mu * vel[i] + g.data()[i] + wd * p[i];
                p[i] = p[i] - lr_t * vel[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn quadratic_grads(store: &ParamStore<f64>) -> ParamGrads<f64> {
        let mut g = Graph::new();
        let id = store.ids().next().unwrap();
        let p = g.param(store, id);
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        g.param_grads(&grads)
    }

    #[test]
    fn adamw_moves_against_the_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_f64_slice(&[2, 1], &[1.0, -2.0]).unwrap());
        let mut opt = AdamW::new(0.9, 0.95, 0.0);
        for _ in 0..200 {
            let grads = quadratic_grads(&store);
            opt.step(&mut store, &grads, 0.05);
        }
        let w = store.value(store.find("w").unwrap());
        assert!(w.data().iter().all(|v| v.abs() < 0.05), "{:?}", w.data());
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_f64_slice(&[1], &[1.0]).unwrap());
        let grads = quadratic_grads(&store);
        store.set_trainable(false);
        let before = store.clone();
        AdamW::new(0.9, 0.95, 0.05).step(&mut store, &grads, 0.1);
        Sgd::new(0.9, 1e-4).step(&mut store, &grads, 0.1);
        assert_eq!(before, store);
    }
}
