use crate::params::{ParamGrads, ParamStore};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moment buffers follow [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched; a zero `lr` leaves every parameter bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(id);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[3.0, -2.0]));
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let w = g.param(id);
                let sq = g.square(w);
                let loss = g.sum_all(sq);
                g.backward(loss).into_params()
            };
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[0.123, 4.5]));
        let before = store.clone();
        let mut opt = Adam::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::zeros_like(&store);
        grads.accumulate(id.index(), &Tensor::row(&[1.0, -1.0]));
        opt.step(&mut store, &grads, 0.0);
        assert_eq!(store, before);
    }
}
