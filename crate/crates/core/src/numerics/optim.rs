//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use super::tensor::{r, Real};
use crate::error::{Error, Result};

/// Hyperparameters for one optimizer step. Defaults: beta1 0.9, beta2 0.999,
/// eps 1e-8, no decay.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Real> AdamHyper<T> {
    pub fn new(lr: T) -> Self {
        AdamHyper {
            lr,
            beta1: r(0.9),
            beta2: r(0.999),
            eps: r(1e-8),
            weight_decay: T::zero(),
        }
    }

    pub fn with_decay(lr: T, weight_decay: T) -> Self {
        AdamHyper {
            weight_decay,
            ..Self::new(lr)
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![T::zero(); numel],
            v: vec![T::zero(); numel],
        }
    }
}

/// One AdamW update in place. `step` is 1-based and drives bias correction.
/// Weight decay is decoupled: it scales the parameter directly and never
/// enters the moment estimates.
pub fn adamw_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    hp: &AdamHyper<T>,
    step: u64,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Shape(format!(
            "adamw: param {} / grad {} / state {} lengths disagree",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if step == 0 {
        return Err(Error::Numeric("adamw: step counter must be 1-based".into()));
    }
    for &g in grad {
        if !g.is_finite() {
            return Err(Error::Numeric("adamw: non-finite gradient".into()));
        }
    }
    let bc1 = T::one() - hp.beta1.powi(step as i32);
    let bc2 = T::one() - hp.beta2.powi(step as i32);
    let one = T::one();
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (one - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (one - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * param[i]);
    }
    Ok(())
}

/// Scale all gradient slices so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [&mut [T]], max_norm: T) -> T {
    let mut sq = T::zero();
    for g in grads.iter() {
        for &v in g.iter() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > T::zero() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
