use serde::{Deserialize, Serialize};

use super::scalar::{s, Scalar};
use crate::error::{bail, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Moment buffers for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, param_sizes: &[usize]) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// Global L2 norm over all gradient buffers (accumulated in f64).
pub fn global_grad_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> Result<f64> {
    let norm = global_grad_norm(grads);
    if !norm.is_finite() {
        bail!(Numeric, "gradient norm is {}", norm);
    }
    if max_norm > 0.0 && norm > max_norm {
        let f: T = s(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x = *x * f);
        }
    }
    Ok(norm)
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
///
/// `decay_mask[i]` selects whether parameter `i` receives weight decay; gradients
/// are clipped to `clip` global norm first (no clipping when `clip <= 0`).
/// Returns the pre-clip gradient norm.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &mut [Vec<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    clip: f64,
    decay_mask: Option<&[bool]>,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        bail!(
            Dimension,
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        );
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            bail!(Dimension, "parameter {} size mismatch", i);
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            bail!(Numeric, "non-finite gradient in parameter {} at element {}", i, j);
        }
    }
    let norm = clip_grad_norm(grads, clip)?;
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2): (T, T) = (s(c.beta1), s(c.beta2));
    let (one_b1, one_b2): (T, T) = (s(1.0 - c.beta1), s(1.0 - c.beta2));
    let step: T = s(lr / bc1);
    let bc2_sqrt: T = s(bc2.sqrt());
    let eps: T = s(c.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = decay_mask.map_or(true, |m| m[i]);
        let wd: T = if decay { s(1.0 - lr * c.weight_decay) } else { T::one() };
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let denom = v[j].sqrt() / bc2_sqrt + eps;
            p[j] = p[j] * wd - step * m[j] / denom;
        }
    }
    Ok(norm)
}

/// Linear warmup to `peak`, then cosine decay to `floor` at `total_steps`.
pub fn cosine_lr(
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
    peak: f64,
    floor: f64,
) -> Result<f64> {
    if total_steps < warmup_steps {
        bail!(Config, "total steps {} < warmup steps {}", total_steps, warmup_steps);
    }
    if step > total_steps {
        bail!(Config, "step {} beyond schedule end {}", step, total_steps);
    }
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(peak);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
