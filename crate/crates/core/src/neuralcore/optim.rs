//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub cfg: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamWState {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// One update of every tensor in `params`. Tensors whose gradient is `None`
/// are left untouched (no decay, no moment update). The learning rate comes
/// from the caller's schedule.
pub fn adamw_step(
    state: &mut AdamWState,
    params: &mut [&mut Mat],
    grads: &[Option<&Mat>],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len()
        || state
            .first
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.data.len())
    {
        return Err(Error::shape(
            "optimizer moments do not match parameter shapes",
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.cfg;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let Some(g) = g else { continue };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let w = p.data[i] * (1.0 - lr * weight_decay);
            p.data[i] = w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup_fraction` of steps, then cosine
/// decay to zero. `step` counts from 0.
pub fn scheduled_lr(step: usize, total_steps: usize, max_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((warmup_fraction * total_steps as f64).ceil() as usize).min(total_steps);
    if step < warmup {
        return max_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
