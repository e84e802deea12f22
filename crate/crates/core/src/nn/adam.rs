use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::ParamSet;

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort the step before any
    /// parameter or moment changes.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.names().iter().zip(params.values()).zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "adam: non-finite gradient for {name} at index {index}"
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.values().iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(w));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.7);
        let mut opt = Adam::new(1e-3);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.values()[0].data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut p = single(1.0);
            let mut opt = Adam::new(1e-4);
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let delta = p.values()[0].data()[0] - 1.0;
            assert!((delta + 1e-4 * f64::signum(g)).abs() < 1e-9, "delta {delta}");
        }
    }

    #[test]
    fn descends_a_parabola() {
        // f(w) = w^2 from w = 1; simulate three steps directly.
        let mut p = single(1.0);
        let mut opt = Adam::new(0.1);
        let mut prev = 1.0;
        for _ in 0..3 {
            let w = p.values()[0].data()[0];
            opt.step(&mut p, &[Tensor::scalar(2.0 * w)]).unwrap();
            let w = p.values()[0].data()[0];
            assert!(w * w < prev);
            prev = w * w;
        }
        assert_eq!(opt.steps_taken(), 3);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = single(-2.5);
        let mut opt = Adam::new(0.0);
        opt.step(&mut p, &[Tensor::scalar(10.0)]).unwrap();
        assert_eq!(p.values()[0].data(), &[-2.5]);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = single(1.0);
        let mut opt = Adam::new(0.1);
        let err = opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains("non-finite gradient for w"));
        assert_eq!(p.values()[0].data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
