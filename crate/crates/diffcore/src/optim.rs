//! Adam and the cosine-annealing learning-rate schedule.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{DiffError, Result};
use crate::params::ParamGroup;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<E> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    moments: HashMap<String, (Vec<E>, Vec<E>)>,
}

impl<E: Element> Default for AdamState<E> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<E: Element> AdamState<E> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step: 0,
            beta1,
            beta2,
            epsilon,
            moments: HashMap::new(),
        }
    }

    /// First and second moment buffers of a parameter, if it has been
    /// updated at least once.
    pub fn moments(&self, name: &str) -> Option<(&[E], &[E])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, name: impl Into<String>, m: Vec<E>, v: Vec<E>) {
        self.moments.insert(name.into(), (m, v));
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
///
/// Every parameter must carry a gradient; nothing is modified otherwise.
pub fn adam_step<E: Element>(params: &mut ParamGroup<E>, state: &mut AdamState<E>, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(DiffError::MissingGrad(name.to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (E::from_f64(state.beta1), E::from_f64(state.beta2));
    let one = E::one();
    let corr1 = E::from_f64(1.0 - state.beta1.powi(t));
    let corr2 = E::from_f64(1.0 - state.beta2.powi(t));
    let lr = E::from_f64(lr);
    let eps = E::from_f64(state.epsilon);
    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![E::zero(); n], vec![E::zero(); n]));
        let grad = tensor.grad().expect("checked above").to_vec();
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_initial: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_initial: f64, total_steps: u64) -> Self {
        Self {
            lr_initial,
            lr_min: 0.0,
            total_steps: total_steps.max(1),
        }
    }

    pub fn with_min(mut self, lr_min: f64) -> Self {
        self.lr_min = lr_min;
        self
    }
}

/// Learning rate at `step`; out-of-range steps clamp to the endpoints.
pub fn cosine_lr(schedule: &CosineSchedule, step: i64) -> f64 {
    let total = schedule.total_steps as i64;
    let s = if step < 0 || step > total {
        log::warn!("cosine_lr: step {step} outside [0, {total}], clamping");
        step.clamp(0, total)
    } else {
        step
    };
    if s == 0 {
        return schedule.lr_initial;
    }
    if s == total {
        return schedule.lr_min;
    }
    let phase = std::f64::consts::PI * s as f64 / total as f64;
    schedule.lr_min + 0.5 * (schedule.lr_initial - schedule.lr_min) * (1.0 + phase.cos())
}
