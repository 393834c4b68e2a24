use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn for_single(config: AdamWConfig, param: &Tensor<T>) -> Self {
        Self::new(config, std::slice::from_ref(param))
    }
}

/// One AdamW update with bias-corrected moments; weight decay is applied to
/// the weights directly rather than folded into the gradient.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<(), AutodiffError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(AutodiffError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(AutodiffError::ShapeMismatch(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "param {i}: {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(AutodiffError::NonFinite("adamw gradient"));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let one = T::one();
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let lr_t = T::lit(lr);
    let decay = T::lit(1.0 - lr * c.weight_decay);
    let eps = T::lit(c.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = b1 * *mj + (one - b1) * gj;
            *vj = b2 * *vj + (one - b2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *pj = *pj * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Fraction of the run spent warming up.
pub const ONE_CYCLE_WARMUP: f64 = 0.1;
/// Starting lr as a fraction of the peak.
pub const ONE_CYCLE_START: f64 = 0.1;
/// Final lr as a fraction of the peak.
pub const ONE_CYCLE_END: f64 = 0.01;

/// One-cycle schedule: linear warmup from `lr_max/10` to `lr_max` over the
/// first 10% of steps, then cosine annealing to `lr_max/100` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64, AutodiffError> {
    if step >= total_steps {
        return Err(AutodiffError::InvalidArgument(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warm = ((total_steps as f64 * ONE_CYCLE_WARMUP).round() as usize).clamp(1, total_steps.saturating_sub(1).max(1));
    let start = lr_max * ONE_CYCLE_START;
    let end = lr_max * ONE_CYCLE_END;
    if step <= warm {
        return Ok(start + (lr_max - start) * step as f64 / warm as f64);
    }
    let span = (total_steps - 1 - warm) as f64;
    let progress = (step - warm) as f64 / span;
    Ok(end + (lr_max - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adamw(p0: f64, grads: &[f64], lr: f64, c: AdamWConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p -= lr * c.weight_decay * p;
            p -= lr * mh / (vh.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let c = AdamWConfig {
            weight_decay: 0.0,
            eps: 1e-12,
            ..Default::default()
        };
        let mut p = vec![Tensor::vector(vec![0.5f64])];
        let g = vec![Tensor::vector(vec![1.0f64])];
        let mut st = OptimState::new(c, &p);
        adamw_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert!((p[0].data()[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let c = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![Tensor::vector(vec![0.25f64, -3.0, 7.0])];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[3])];
        let mut st = OptimState::new(c, &p);
        for _ in 0..3 {
            adamw_step(&mut p, &g, &mut st, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let c = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        let mut p = vec![Tensor::vector(vec![1.5f64])];
        let g = vec![Tensor::vector(vec![0.3f64])];
        let mut st = OptimState::new(c, &p);
        adamw_step(&mut p, &g, &mut st, 0.01).unwrap();
        adamw_step(&mut p, &g, &mut st, 0.01).unwrap();
        let expect = scalar_adamw(1.5, &[0.3, 0.3], 0.01, c);
        assert!((p[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_gradients_and_bad_lr() {
        let mut p = vec![Tensor::vector(vec![1.0f64])];
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        let bad = vec![Tensor::vector(vec![f64::NAN])];
        assert!(adamw_step(&mut p, &bad, &mut st, 0.1).is_err());
        let ok = vec![Tensor::vector(vec![1.0f64])];
        assert!(adamw_step(&mut p, &ok, &mut st, 0.0).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn one_cycle_shape() {
        let total = 1000;
        let lr = 0.002;
        assert!((one_cycle_lr(0, total, lr).unwrap() - lr / 10.0).abs() < 1e-15);
        assert!((one_cycle_lr(100, total, lr).unwrap() - lr).abs() < 1e-15);
        let last = one_cycle_lr(total - 1, total, lr).unwrap();
        assert!((last - lr / 100.0).abs() < 0.01 * lr / 100.0);
        assert!(one_cycle_lr(total, total, lr).is_err());
        for s in 0..total {
            let v = one_cycle_lr(s, total, lr).unwrap();
            assert!(v > 0.0 && v <= lr * (1.0 + 1e-12));
        }
    }

    #[test]
    fn one_cycle_tiny_runs() {
        for total in 1..5 {
            for s in 0..total {
                assert!(one_cycle_lr(s, total, 1.0).unwrap() > 0.0);
            }
        }
    }
}
