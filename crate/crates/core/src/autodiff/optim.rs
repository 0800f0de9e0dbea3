//! First-order optimizers over a flat parameter vector and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::NetworkParams;
use crate::{Error, Result};

/// Cosine decay from `lr0` to zero over `total_steps`, flat at zero afterwards.
pub fn cosine_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay; `total_steps` of zero means "the length of the run".
    Cosine {
        total_steps: u64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine { total_steps: 0 }
    }
}

impl LrSchedule {
    pub fn lr(&self, lr0: f64, step: u64, run_length: u64) -> f64 {
        match *self {
            LrSchedule::Constant => lr0,
            LrSchedule::Cosine { total_steps } => {
                let t = if total_steps == 0 { run_length } else { total_steps };
                cosine_lr(lr0, step, t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Rmsprop,
}

fn check_grads(params: &NetworkParams, grads: &[f64]) -> Result<()> {
    if grads.len() != params.total_count() {
        return Err(Error::shape(format!(
            "{} gradient entries for {} parameters",
            grads.len(),
            params.total_count()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::domain(format!("gradient entry {i} is not finite")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update, in place. Non-finite gradients are rejected
/// before anything is modified.
pub fn adam_step(params: &mut NetworkParams, grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    if state.m.len() != grads.len() {
        return Err(Error::shape("optimizer state does not match parameter count"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub decay: f64,
    pub eps: f64,
    pub step: u64,
    sq: Vec<f64>,
}

impl RmsPropState {
    pub fn new(n: usize) -> Self {
        Self {
            decay: 0.9,
            eps: 1e-7,
            step: 0,
            sq: vec![0.0; n],
        }
    }
}

pub fn rmsprop_step(params: &mut NetworkParams, grads: &[f64], state: &mut RmsPropState, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    if state.sq.len() != grads.len() {
        return Err(Error::shape("optimizer state does not match parameter count"));
    }
    state.step += 1;
    let (rho, eps) = (state.decay, state.eps);
    for ((p, g), s) in params.values_mut().iter_mut().zip(grads).zip(&mut state.sq) {
        *s = rho * *s + (1.0 - rho) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam(AdamState),
    Rmsprop(RmsPropState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(n)),
            OptimizerKind::Rmsprop => Optimizer::Rmsprop(RmsPropState::new(n)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::Rmsprop(_) => OptimizerKind::Rmsprop,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Optimizer::Adam(s) => s.step,
            Optimizer::Rmsprop(s) => s.step,
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &[f64], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(s) => adam_step(params, grads, s, lr),
            Optimizer::Rmsprop(s) => rmsprop_step(params, grads, s, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;

    /// A 1->2 layer: four parameters.
    fn params(values: &[f64; 4]) -> NetworkParams {
        let mut p = NetworkParams::builder()
            .layer("f", 1, 2, Activation::Linear)
            .zeros()
            .unwrap();
        p.values_mut().copy_from_slice(values);
        p
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(5e-4, 0, 10_000), 5e-4);
        assert!(cosine_lr(5e-4, 10_000, 10_000).abs() < 1e-20);
        assert!((cosine_lr(5e-4, 5_000, 10_000) - 2.5e-4).abs() < 1e-15);
        assert!(cosine_lr(5e-4, 20_000, 10_000).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = params(&[1.0, -2.0, 3.0, 0.5]);
        let before = p.clone();
        let mut s = AdamState::new(p.total_count());
        adam_step(&mut p, &[0.0; 4], &mut s, 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params(&[1.0, -2.0, 3.0, 0.5]);
        let before = p.values().to_vec();
        let g = vec![0.3, -4.0, 1e-3, -0.02];
        let mut s = AdamState::new(4);
        let lr = 1e-2;
        adam_step(&mut p, &g, &mut s, lr).unwrap();
        for ((after, b), gi) in p.values().iter().zip(&before).zip(&g) {
            let expected = -gi.signum() * lr / (1.0 + s.eps / gi.abs());
            assert!((after - b - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_converges() {
        let target = [0.7, -1.3, 2.2, 0.1];
        let mut p = params(&[0.0; 4]);
        let mut s = AdamState::new(4);
        for _ in 0..200 {
            let g: Vec<f64> = p.values().iter().zip(&target).map(|(w, t)| 2.0 * (w - t)).collect();
            adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        }
        for (w, t) in p.values().iter().zip(&target) {
            assert!((w - t).abs() < 1e-3, "{w} vs {t}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut p = params(&[1.0, 2.0, 3.0, 4.0]);
        let before = p.clone();
        let mut s = AdamState::new(4);
        let err = adam_step(&mut p, &[0.0, f64::NAN, 0.0, 0.0], &mut s, 1e-3);
        assert!(err.is_err());
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
        let mut r = RmsPropState::new(4);
        assert!(rmsprop_step(&mut p, &[f64::INFINITY, 0.0, 0.0, 0.0], &mut r, 1e-3).is_err());
    }

    #[test]
    fn rmsprop_descends() {
        let mut p = params(&[3.0, -3.0, 0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Rmsprop, 4);
        let loss = |p: &NetworkParams| p.values().iter().map(|v| v * v).sum::<f64>();
        let start = loss(&p);
        for _ in 0..100 {
            let g: Vec<f64> = p.values().iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(loss(&p) < 0.01 * start);
        assert_eq!(opt.steps_taken(), 100);
    }
}
