//! SGD with momentum and the linear learning-rate decay.

use crate::error::{invalid, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub total_iters: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            total_iters: 4000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("sgd", format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.base_lr > 0.0) {
            return Err(invalid("sgd", format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.total_iters == 0 {
            return Err(invalid("sgd", "total_iters must be positive"));
        }
        Ok(())
    }
}

/// `buf = momentum * buf + grad; value -= lr * buf`, then zero the gradients.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: f64, momentum: f64) {
    let lr = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    for p in store.params_mut() {
        let grad = p.grad.data();
        for ((v, b), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.momentum.data_mut())
            .zip(grad)
        {
            *b = mu * *b + g;
            *v = *v - lr * *b;
        }
        p.grad.fill(T::zero());
    }
}

/// Linear decay from `base_lr` at iteration 0 towards 0 at `total_iters`.
pub fn lr_schedule(iter: usize, cfg: &SgdConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        return Err(invalid(
            "lr_schedule",
            format!("iteration {iter} outside [0, {})", cfg.total_iters),
        ));
    }
    Ok(cfg.base_lr * (1.0 - iter as f64 / cfg.total_iters as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v));
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn two_momentum_steps() {
        let mut s = one_param(1.0, 1.0);
        sgd_step(&mut s, 0.1, 0.9);
        let p = &s.params()[0];
        assert!((p.value.data()[0] - 0.9).abs() < 1e-12);
        assert_eq!(p.momentum.data()[0], 1.0);
        assert_eq!(p.grad.data()[0], 0.0);

        s.params_mut()[0].grad = Tensor::scalar(1.0);
        sgd_step(&mut s, 0.1, 0.9);
        let p = &s.params()[0];
        // buf = 0.9 * 1 + 1 = 1.9; value = 0.9 - 0.19 = 0.71
        assert!((p.momentum.data()[0] - 1.9).abs() < 1e-12);
        assert!((p.value.data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_value() {
        let mut s = one_param(1.0, 5.0);
        sgd_step(&mut s, 0.0, 0.9);
        assert_eq!(s.params()[0].value.data()[0], 1.0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = SgdConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 0.01);
        assert!((lr_schedule(3999, &cfg).unwrap() - 2.5e-6).abs() < 1e-15);
        assert!((lr_schedule(2000, &cfg).unwrap() - 0.005).abs() < 1e-15);
        assert!(lr_schedule(4000, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        assert!(SgdConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { base_lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
