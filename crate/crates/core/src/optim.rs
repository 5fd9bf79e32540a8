//! Stochastic gradient descent with heavy-ball momentum and decoupled weight
//! decay: `v <- mu v + g`, `p <- p - lr (v + wd p)`.

use crate::autograd::ParamStore;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn sgd_update<T: Scalar>(p: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T, weight_decay: T) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * (*v + weight_decay * *p);
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<T>) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.velocity.len() || params.len() != grads.len() {
            return Err(Error::input(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        let (lr, mu, wd) = (T::lit(self.learning_rate), T::lit(self.momentum), T::lit(self.weight_decay));
        for (id, (g, v)) in grads.iter().zip(&mut self.velocity).enumerate() {
            let p = params.tensor_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::input(format!(
                    "gradient shape {:?} differs from parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            sgd_update(p.data_mut(), g.data(), v.data_mut(), lr, mu, wd);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_steps() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(v[0], 0.5);
        assert!((p[0] - 0.95).abs() < 1e-15);
        sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] - 0.95).abs() < 1e-15);
        assert!((p[0] - 0.855).abs() < 1e-15);
        let mut p = [2.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.0], &mut v, 0.5, 0.0, 0.1);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_fn(&[3], |i| i as f64), false).unwrap();
        let before = store.clone();
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let mut opt = Sgd::new(&cfg, &store);
        opt.step(&mut store, &[Tensor::ones(&[3])]).unwrap();
        assert_eq!(store.get("w"), before.get("w"));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_fn(&[4], |i| i as f64 - 1.5), false).unwrap();
        let cfg = TrainConfig { learning_rate: 0.05, weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = Sgd::new(&cfg, &store);
        for _ in 0..300 {
            let g = store.get("w").unwrap().scale(2.0);
            opt.step(&mut store, &[g]).unwrap();
        }
        assert!(store.get("w").unwrap().data().iter().all(|v| v.abs() < 1e-6));
    }
}
