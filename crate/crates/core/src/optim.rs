//! Adam with bias correction, step-decay learning rate, global-norm clipping.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers for every parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>], config: AdamConfig) -> Self {
        let zeros = |p: &Tensor<S>| Tensor::zeros(p.shape().to_vec());
        Self { config, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "adam_step",
                "{} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(shape_err!("adam_step", "parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        let (b1, b2) = (S::of(beta1), S::of(beta2));
        let (one_b1, one_b2) = (S::of(1.0 - beta1), S::of(1.0 - beta2));
        let (bc1, bc2, eps, lr) = (S::of(bc1), S::of(bc2), S::of(eps), S::of(lr));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant decay: `initial_lr · decay_factor^⌊epoch / step_size⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub step_size_epochs: usize,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial_lr: 0.0002, step_size_epochs: 10, decay_factor: 0.9 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || self.step_size_epochs == 0 || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0)
        {
            return Err(Error::InvalidArgument(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let k = (epoch / self.step_size_epochs) as i32;
        self.initial_lr * libm::pow(self.decay_factor, k as f64)
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm measured before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|g| g.sq_norm().as_f64()).sum::<f64>());
    if max_norm > 0.0 && norm > max_norm {
        let c = S::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![Tensor::<f64>::from_f64([2], &[1.5, -2.0]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamConfig::default());
        for _ in 0..5 {
            state.step(&mut params, &[Tensor::zeros([2])], 0.01).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::scalar(1.0f64)];
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &[Tensor::scalar(1.0)], 0.0002).unwrap();
        // lr · g / (|g| + eps) after bias correction
        let expected = 1.0 - 0.0002 * 1.0 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let p = Tensor::<f32>::from_f64([3], &[0.1, 0.2, 0.3]).unwrap();
        let g = Tensor::<f32>::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let mut params = vec![p.clone(), p];
        let mut state = AdamState::new(&params, AdamConfig::default());
        for _ in 0..3 {
            state.step(&mut params, &[g.clone(), g.clone()], 0.001).unwrap();
        }
        assert_eq!(params[0], params[1]);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut params = vec![Tensor::<f64>::zeros([2])];
        let mut state = AdamState::new(&params, AdamConfig::default());
        assert!(matches!(state.step(&mut params, &[Tensor::zeros([3])], 0.1), Err(Error::ShapeMismatch { .. })));
        let nan = Tensor::from_f64([2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(state.step(&mut params, &[nan], 0.1), Err(Error::NonFinite { .. })));
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at_epoch(0), 0.0002);
        assert_eq!(s.lr_at_epoch(9), 0.0002);
        assert!((s.lr_at_epoch(10) - 0.00018).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let lr = s.lr_at_epoch(e);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Tensor::<f64>::from_f64([2], &[3.0, 4.0]).unwrap(), Tensor::from_f64([1], &[12.0]).unwrap()];
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - 13.0).abs() < 1e-12);
        let after = g.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
        let mut small = vec![Tensor::<f64>::from_f64([1], &[1.0]).unwrap()];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].item(), 1.0);
    }
}
