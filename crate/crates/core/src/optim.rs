//! AdamW and Lion updates plus the warmup learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Per-step hyperparameters shared by both optimizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Denominator fuzz for AdamW; unused by Lion.
    pub eps: f64,
}

pub const ADAM_EPS: f64 = 1e-8;

fn check_shapes(op: &'static str, params: &[&mut Matrix], grads: &[Matrix], state: &[Matrix], decay: &[bool]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() || params.len() != decay.len() {
        return Err(Error::shape(
            op,
            format!(
                "{} params, {} grads, {} state tensors, {} decay flags",
                params.len(),
                grads.len(),
                state.len(),
                decay.len()
            ),
        ));
    }
    for (i, ((p, g), s)) in params.iter().zip(grads).zip(state).enumerate() {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::shape(
                op,
                format!("tensor {i}: param {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), s.shape()),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamWState {
    pub fn zeros_like(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam moments with decoupled weight decay on tensors whose
/// `decay` flag is set.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    decay: &[bool],
    state: &mut AdamWState,
    cfg: &StepConfig,
) -> Result<()> {
    check_shapes("adamw_step", params, grads, &state.m, decay)?;
    check_shapes("adamw_step", params, grads, &state.v, decay)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let p = params[i].as_mut_slice();
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] *= 1.0 - cfg.lr * wd;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LionState {
    pub m: Vec<Matrix>,
}

impl LionState {
    pub fn zeros_like(params: &[&Matrix]) -> Self {
        Self {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `u = sign(β₁m + (1−β₁)g)`, `p ← p − lr(u + wd·p)`, `m ← β₂m + (1−β₂)g`.
pub fn lion_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    decay: &[bool],
    state: &mut LionState,
    cfg: &StepConfig,
) -> Result<()> {
    check_shapes("lion_step", params, grads, &state.m, decay)?;
    for i in 0..params.len() {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let p = params[i].as_mut_slice();
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        for j in 0..p.len() {
            let u = sign(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j]);
            p[j] -= cfg.lr * (u + wd * p[j]);
            m[j] = cfg.beta2 * m[j] + (1.0 - cfg.beta2) * g[j];
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

/// Learning rate at optimizer step `step` (0-based) out of `total` steps:
/// linear warmup `lr·(step+1)/warmup`, then constant or cosine decay to 0.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize, schedule: Schedule) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
