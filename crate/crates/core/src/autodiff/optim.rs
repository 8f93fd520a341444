use serde::{Deserialize, Serialize};

use crate::scalar::Real;

use super::{ParamId, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam with bias correction. Moments are kept for every trainable parameter
/// in store order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    ids: Vec<usize>,
}

impl AdamState {
    pub fn new<T: Real>(store: &ParamStore<T>, lr: f64) -> Self {
        let ids = store.trainable_ids();
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).value.len()];
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids: ids.iter().map(|id| id.index()).collect(),
        }
    }

    pub fn moments(&self, k: usize) -> (&[f64], &[f64]) {
        (&self.m[k], &self.v[k])
    }

    /// One update from the gradients currently held in the store.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, &idx) in self.ids.iter().enumerate() {
            let p = store.get_mut(ParamId(idx));
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[j].to_f64_lossy();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
                *w = T::lit(w.to_f64_lossy() - upd);
            }
        }
    }
}

/// Joint L2 norm of all trainable gradients.
pub fn global_grad_norm<T: Real>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.iter())
        .map(|g| g.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescale all trainable gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[values.len()], values.to_vec()), true);
        s.get_mut(id).grad.copy_from_slice(grads);
        s
    }

    #[test]
    fn clipping_scales_to_unit_norm() {
        let mut s = store_with(&[0.0, 0.0], &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut s, 1.0), 5.0);
        let g = s.iter().next().unwrap().grad.clone();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn small_gradients_are_not_clipped() {
        let mut s = store_with(&[0.0, 0.0], &[0.1, 0.1]);
        clip_global_norm(&mut s, 1.0);
        assert_eq!(s.iter().next().unwrap().grad, vec![0.1, 0.1]);
    }

    #[test]
    fn clipping_across_parameters_uses_joint_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[1]), true);
        let b = s.add("b", Tensor::zeros(&[1]), true);
        s.get_mut(a).grad[0] = 6.0;
        s.get_mut(b).grad[0] = 8.0;
        clip_global_norm(&mut s, 2.0);
        assert!((s.grad(a)[0] - 1.2).abs() < 1e-15);
        assert!((s.grad(b)[0] - 1.6).abs() < 1e-15);
        assert!(global_grad_norm(&s) <= 2.0 + 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[1.5, -2.0], &[0.0, 0.0]);
        let mut adam = AdamState::new(&s, 0.1);
        adam.step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.5, -2.0]);
        assert_eq!(adam.moments(0).0, &[0.0, 0.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(&[0.0, 0.0], &[0.37, -12.0]);
        let mut adam = AdamState::new(&s, 0.01);
        adam.step(&mut s);
        let w = s.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] + 0.01).abs() < 1e-8);
        assert!((w[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn moments_decay_without_gradient() {
        let mut s = store_with(&[0.0], &[1.0]);
        let mut adam = AdamState::new(&s, 0.01);
        adam.step(&mut s);
        let (m1, v1) = (adam.moments(0).0[0], adam.moments(0).1[0]);
        s.zero_grad();
        adam.step(&mut s);
        assert!((adam.moments(0).0[0] - 0.9 * m1).abs() < 1e-15);
        assert!((adam.moments(0).1[0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn untrainable_entries_are_skipped() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[1]), false);
        s.get_mut(a).grad[0] = 1.0;
        let mut adam = AdamState::new(&s, 0.1);
        adam.step(&mut s);
        assert_eq!(s.value(a).data(), &[0.0]);
    }
}
