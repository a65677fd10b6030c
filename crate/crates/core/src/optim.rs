use std::collections::BTreeMap;

use crate::nn::{Grads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are kept per parameter across steps.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<ParamId, Tensor<T>>,
    v: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(&id)?, self.v.get(&id)?))
    }

    /// Restores state saved by a checkpoint.
    pub fn restore(&mut self, step: u64, moments: impl IntoIterator<Item = (ParamId, Tensor<T>, Tensor<T>)>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (id, m, v) in moments {
            self.m.insert(id, m);
            self.v.insert(id, v);
        }
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let corr1 = T::lit(1.0 - self.beta1.powi(t));
        let corr2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (id, g) in grads.iter() {
            if !store.get(id).trainable {
                continue;
            }
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Step-decay schedule: `lr0 * 0.5^floor(step / halve_every)`.
pub fn halving_lr(lr0: f64, halve_every: u64, step: u64) -> f64 {
    if halve_every == 0 {
        return lr0;
    }
    lr0 * 0.5f64.powi((step / halve_every) as i32)
}
