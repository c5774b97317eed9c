//! AdamW: Adam with decoupled weight decay.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: step count plus first and second moments per parameter.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    /// Fresh state with zeroed moments shaped like `store`'s parameters.
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store
            .params()
            .map(|(_, p)| alloc::vec![T::zero(); p.numel()])
            .collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient buffer:
    /// `θ ← θ − lr·wd·θ − lr·m̂ / (√v̂ + ε)`.
    ///
    /// Gradients are left untouched; zeroing them is the caller's job.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.num_params() {
            return Err(Error::Contract(alloc::format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.num_params()
            )));
        }
        for ((name, p), m) in store.params().zip(&self.m) {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(name.into()));
            }
            if m.len() != p.numel() {
                return Err(Error::shape("adamw state", &[m.len()], p.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - Float::powi(c.beta1, t);
        let bias2 = 1.0 - Float::powi(c.beta2, t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (inv_bias1, inv_bias2) = (T::of(1.0 / bias1), T::of(1.0 / bias2));
        for (((_, p), m), v) in store.params_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for k in 0..data.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let m_hat = m[k] * inv_bias1;
                let v_hat = v[k] * inv_bias2;
                data[k] = data[k] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments in parameter order, for serialization.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved state; shapes must match `store`.
    pub fn restore(
        config: AdamWConfig,
        step: u64,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        if m.len() != store.num_params() || v.len() != store.num_params() {
            return Err(Error::Contract("optimizer state does not match model".into()));
        }
        for (((_, p), a), b) in store.params().zip(&m).zip(&v) {
            if a.len() != p.numel() || b.len() != p.numel() {
                return Err(Error::shape("adamw state", &[a.len()], p.shape()));
            }
        }
        Ok(AdamW { config, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("theta", Tensor::scalar(value)).unwrap();
        s
    }

    #[test]
    fn zero_grad_without_decay_leaves_param_unchanged() {
        let mut s = one_param(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get("theta").unwrap().data(), &[0.7]);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 after one step with g = 1, so Δθ = −lr / (1 + ε).
        let mut s = one_param(0.0);
        s.get_mut("theta").unwrap().grad_mut().unwrap()[0] = 1.0;
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        let theta = s.get("theta").unwrap().data()[0];
        assert!((theta - (-0.0005 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(s.get("theta").unwrap().grad().unwrap(), &[1.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut s = one_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let theta = s.get("theta").unwrap().data()[0];
            s.get_mut("theta").unwrap().grad_mut().unwrap()[0] = 2.0 * theta;
            opt.step(&mut s).unwrap();
            let now = s.get("theta").unwrap().data()[0];
            assert!(now * now < prev * prev);
            prev = now;
        }
    }

    #[test]
    fn missing_grad_is_reported() {
        let mut s = one_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        s.get_mut("theta").unwrap().set_requires_grad(false);
        assert_eq!(opt.step(&mut s).unwrap_err(), Error::MissingGrad("theta".into()));
        assert_eq!(opt.steps(), 0);
    }
}
