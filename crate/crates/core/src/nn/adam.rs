//! Adam optimizer over a [`ParamStore`].

use crate::nn::store::ParamStore;

/// Adam with the L2 regularizer folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let first_moment = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        let second_moment = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every trainable parameter; gradients are left intact
    /// so callers can inspect them afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.entries()[id.0].trainable {
                continue;
            }
            let grad = store.grad(id).data().to_vec();
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let value = store.value_mut(id);
            for (i, val) in value.data_mut().iter_mut().enumerate() {
                let g = grad[i] + self.weight_decay * *val;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *val -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize f(w) = (w - 3)^2 elementwise
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::zeros(&[2]), true).unwrap();
        let mut opt = Adam::new(&store, 0.9, 0.999, 0.0);
        for _ in 0..500 {
            store.zero_grads();
            let w = store.value(id).data().to_vec();
            for (g, wv) in store.grad_mut(id).data_mut().iter_mut().zip(&w) {
                *g = 2.0 * (wv - 3.0);
            }
            opt.step(&mut store, 0.05);
        }
        for w in store.value(id).data() {
            assert!((w - 3.0).abs() < 0.05, "w = {w}");
        }
    }

    #[test]
    fn non_trainable_entries_are_skipped() {
        let mut store = ParamStore::new();
        let frozen = store.register("stat", Tensor::full(&[1], 5.0), false).unwrap();
        store.grad_mut(frozen).data_mut()[0] = 100.0;
        let mut opt = Adam::new(&store, 0.9, 0.999, 0.0);
        opt.step(&mut store, 0.1);
        assert_eq!(store.value(frozen).data()[0], 5.0);
    }
}
