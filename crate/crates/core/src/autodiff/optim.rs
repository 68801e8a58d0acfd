use super::{Real, Tensor};
use crate::error::{bail, Result};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for a fixed parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored on `params`.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        bail!(State, "optimizer tracks {} tensors, got {}", state.m.len(), params.len());
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(state.beta1);
    let b2 = T::lit(state.beta2);
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let lr = T::lit(lr);
    let eps = T::lit(state.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.numel() != m.len() {
            bail!(Shape, "moment buffer does not match parameter {:?}", p.shape());
        }
        let (values, grad) = p.parts_mut();
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts: cycle `i` lasts `period0 · period_mult^i`
/// iterations and decays from `base_lr` towards zero.
pub fn cosine_warm_restart_lr(iter: usize, base_lr: f64, period0: usize, period_mult: usize) -> f64 {
    let mut period = period0.max(1);
    let mult = period_mult.max(1);
    let mut t = iter;
    while t >= period {
        t -= period;
        period = period.saturating_mul(mult);
    }
    base_lr * (1.0 + (std::f64::consts::PI * t as f64 / period as f64).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap();
        t.accumulate_grad(&[g]);
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![param(1.0, 1.0)];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &mut st, 1e-4).unwrap();
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((p[0].values()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = vec![param(0.3, 0.0)];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &mut st, 1e-3).unwrap();
        assert_eq!(p[0].values()[0], 0.3);
    }

    #[test]
    fn moments_decay_without_grad() {
        let mut p = vec![param(0.0, 1.0)];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &mut st, 1e-3).unwrap();
        p[0].zero_grad();
        let (m, v) = (st.m[0][0], st.v[0][0]);
        adam_step(&mut p, &mut st, 1e-3).unwrap();
        assert_eq!(st.m[0][0], 0.5 * m);
        assert_eq!(st.v[0][0], 0.99 * v);
    }

    #[test]
    fn identical_params_identical_updates() {
        let mut p = vec![param(0.2, -0.7), param(0.2, -0.7)];
        let mut st = OptimizerState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &mut st, 1e-2).unwrap();
        }
        assert_eq!(p[0].values(), p[1].values());
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_warm_restart_lr(0, 1e-4, 500, 2), 1e-4);
        assert!((cosine_warm_restart_lr(250, 1e-4, 500, 2) - 0.5e-4).abs() < 1e-18);
        assert_eq!(cosine_warm_restart_lr(500, 1e-4, 500, 2), 1e-4);
        // second cycle is twice as long
        assert!((cosine_warm_restart_lr(1000, 1e-4, 500, 2) - 0.5e-4).abs() < 1e-18);
        assert_eq!(cosine_warm_restart_lr(1500, 1e-4, 500, 2), 1e-4);
        assert!(cosine_warm_restart_lr(499, 1e-4, 500, 2) < 1e-8);
    }
}
