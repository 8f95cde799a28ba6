use std::f64::consts::PI;

use super::params::ParameterSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Result};

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.05;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// AdamW moments, step counter and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = |p: &ParameterSet<T>| {
            p.iter()
                .map(|(_, _, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            first_moment: zeros(params),
            second_moment: zeros(params),
            step: 0,
            lr,
            weight_decay,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }
}

/// One decoupled-weight-decay Adam update using the gradients held in `params`.
///
/// Decay multiplies the weights by `1 - lr * wd` before the adaptive step.
pub fn adamw_step<T: Scalar>(params: &mut ParameterSet<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(shape_err(format!(
            "optimizer tracks {} tensors, model has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let lr = state.lr;
    let (b1, b2) = (T::c(state.beta1), T::c(state.beta2));
    let (one_b1, one_b2) = (T::c(1.0 - state.beta1), T::c(1.0 - state.beta2));
    let step_size = T::c(lr / bc1);
    let inv_bc2_sqrt = T::c(1.0 / bc2.sqrt());
    let eps = T::c(state.eps);
    for (i, (_, _, p)) in params.iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        if m.len() != p.value.len() {
            return Err(shape_err("optimizer moment shape differs from parameter"));
        }
        let decay = if p.decay {
            T::c(1.0 - lr * state.weight_decay)
        } else {
            T::one()
        };
        let w = p.value.data_mut();
        let g = p.grad.data();
        for j in 0..w.len() {
            w[j] *= decay;
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let denom = v[j].sqrt() * inv_bc2_sqrt + eps;
            w[j] -= step_size * m[j] / denom;
        }
    }
    Ok(())
}

/// Rescales all trainable gradients so their global L2 norm is at most `max_norm`.
///
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParameterSet<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm().f64();
    if norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / (norm + 1e-6));
        for (_, _, p) in params.iter_mut() {
            if !p.frozen {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    norm
}

/// Linear warmup followed by half-cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LRSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LRSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        cosine_lr(step, self)
    }
}

pub fn cosine_lr(step: u64, schedule: &LRSchedule) -> f64 {
    let LRSchedule {
        base_lr,
        warmup_steps,
        total_steps,
    } = *schedule;
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    (0.5 * base_lr * (1.0 + (PI * progress).cos())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("w", Tensor::from_f64(vec![3], &[1.0, -2.0, 3.0]), true)
            .unwrap();
        let before = ps.clone();
        let mut st = OptimizerState::new(&ps, DEFAULT_LR, 0.0);
        adamw_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.by_name("w").unwrap().value, before.by_name("w").unwrap().value);
    }

    #[test]
    fn defaults() {
        assert_eq!(DEFAULT_LR, 0.001);
        assert_eq!(DEFAULT_WEIGHT_DECAY, 0.05);
    }

    #[test]
    fn scalar_matches_reference_update() {
        let (w0, g, lr, wd) = (0.7f64, -0.3f64, 1e-3, 0.05);
        let mut ps = ParameterSet::<f64>::new();
        let id = ps.insert("w", Tensor::from_f64(vec![1], &[w0]), true).unwrap();
        ps.get_mut(id).grad.data_mut()[0] = g;
        let mut st = OptimizerState::new(&ps, lr, wd);
        adamw_step(&mut ps, &mut st).unwrap();

        // hand-rolled: decay, moments, bias correction
        let w = w0 * (1.0 - lr * wd);
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expect = w - lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((ps.value(id).data()[0] - expect).abs() <= 1e-12);
    }

    #[test]
    fn cosine_schedule_landmarks() {
        let s = LRSchedule {
            base_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert_eq!(cosine_lr(10, &s), 1e-3);
        assert!(cosine_lr(110, &s).abs() < 1e-18);
        assert!((cosine_lr(60, &s) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(0, &s), 0.0);
        assert!((cosine_lr(5, &s) - 5e-4).abs() < 1e-18);
        for step in 0..=110 {
            assert!(cosine_lr(step, &s) >= 0.0);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut ps = ParameterSet::<f64>::new();
        let id = ps.insert("w", Tensor::zeros(vec![2]), true).unwrap();
        ps.get_mut(id).grad.data_mut().copy_from_slice(&[30.0, 40.0]);
        let n = clip_grad_norm(&mut ps, 10.0);
        assert_eq!(n, 50.0);
        assert!((ps.grad_norm() - 10.0).abs() < 1e-5);
    }
}
