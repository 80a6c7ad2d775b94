//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic L2 penalty folded into the gradient.
    pub weight_decay: f64,
    /// Learning-rate multiplier applied once per epoch.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_decay: 0.99,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lr_decay > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update from the gradients stored on `params`; parameters without
    /// a gradient count as zero-gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, cfg: &AdamConfig, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one, eps, wd) = (T::one(), T::lit(cfg.eps), T::lit(cfg.weight_decay));
        let c1 = T::lit(1.0 - cfg.beta1.powi(t));
        let c2 = T::lit(1.0 - cfg.beta2.powi(t));
        let lr = T::lit(lr);
        for ((p, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "moment {:?} vs parameter {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
            let (data, grad) = p.split_grad_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in data.iter_mut().enumerate() {
                let g = grad.map_or(T::zero(), |g| g[i]) + wd * *w;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_unit_gradient_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::full([3], 2.0)).unwrap();
        s.get_mut(id).accumulate_grad(&[1.0; 3]).unwrap();
        let mut st = AdamState::new(&s);
        st.step(&mut s, &AdamConfig::default(), 0.1).unwrap();
        for &w in s.get(id).data() {
            assert!((w - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::full([4], 0.5)).unwrap();
        let mut st = AdamState::new(&s);
        st.step(&mut s, &AdamConfig::default(), 1e-3).unwrap();
        assert_eq!(s.get(id).data(), &[0.5; 4]);
    }
}
