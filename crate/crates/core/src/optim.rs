//! Adam with bias correction.

use crate::params::ParamStore;
use crate::tensor::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.tensor.shape().to_vec()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One optimizer step over every parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((id, p), g) in store.iter().zip(grads) {
            if p.tensor.shape() != g.shape() || self.m[id.index()].shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2, e) = (T::c(beta1), T::c(beta2), T::c(eps));
        let (c1, c2, lr_t) = (T::c(1.0 / bc1), T::c(1.0 / bc2), T::c(lr));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = b1 * *mj + (T::one() - b1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
            }
            let mut p = store.get(id).clone();
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mj * c1;
                let vhat = vj * c2;
                *pj -= lr_t * mhat / (vhat.sqrt() + e);
            }
            store.set(id, p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64([vals.len()], vals).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 on the first step, so Δ = lr / (1 + eps)
        let mut s = store(&[0.5, -0.25]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let lr = 1e-3;
        adam.step(&mut s, &[Tensor::ones([2])], lr).unwrap();
        let expect = lr / (1.0 + 1e-8);
        let w = s.get(s.id("w").unwrap()).data().to_vec();
        assert!((0.5 - w[0] - expect).abs() < 1e-15);
        assert!((-0.25 - w[1] - expect).abs() < 1e-15);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = store(&[1.0, 2.0]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut s, &[Tensor::zeros([2])], 0.1).unwrap();
        }
        assert_eq!(s.get(s.id("w").unwrap()).data(), &[1.0, 2.0]);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = store(&[0.3, 0.3]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for k in 0..20 {
            let g = 0.1 * (k as f64).sin();
            adam.step(&mut s, &[Tensor::full([2], g)], 0.01).unwrap();
        }
        let w = s.get(s.id("w").unwrap()).data();
        assert_eq!(w[0].to_bits(), w[1].to_bits());
        assert!(adam.v.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(&[1.0, 2.0]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        assert!(adam.step(&mut s, &[Tensor::zeros([3])], 0.1).is_err());
        assert!(adam.step(&mut s, &[], 0.1).is_err());
    }
}
