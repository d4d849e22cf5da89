//! Adam with per-tensor learning-rate multipliers, global-norm gradient
//! clipping, and decoupled weight decay (applied before the Adam delta;
//! norm gains and embedding-like tables are never decayed).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ParamKind};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient at step {step} in tensor '{tensor}'")]
    NonFiniteGrad { step: u64, tensor: String },
    #[error("optimizer/model mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

/// Moment buffers mirror the model's parameter registration order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, model: &Model) -> Self {
        let m = model
            .params()
            .iter()
            .map(|p| vec![0.0f32; p.data.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Global L2 norm over every gradient entry, f64 accumulation in
    /// registration order.
    pub fn global_grad_norm(grads: &[Vec<f32>]) -> f64 {
        let mut ss = 0.0f64;
        for g in grads {
            for &x in g {
                ss += x as f64 * x as f64;
            }
        }
        ss.sqrt()
    }
}

/// One optimizer step. `grads` aligns with the model's parameters; `lr_mults`
/// comes from [`Model::param_groups`]. Gradients are clipped (in place) to the
/// configured global norm first; weight decay multiplies the parameter by
/// `1 - lr_eff * wd` before the bias-corrected Adam delta is subtracted.
pub fn adam_step(
    state: &mut AdamState,
    model: &mut Model,
    grads: &mut [Vec<f32>],
    base_lr: f64,
) -> Result<(), OptimError> {
    if grads.len() != model.params().len() {
        return Err(OptimError::Mismatch(format!(
            "{} grads for {} params",
            grads.len(),
            model.params().len()
        )));
    }
    let step = state.step + 1;
    for (g, p) in grads.iter().zip(model.params()) {
        if g.len() != p.data.numel() {
            return Err(OptimError::Mismatch(format!(
                "grad len {} vs param '{}' len {}",
                g.len(),
                p.name,
                p.data.numel()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGrad {
                step,
                tensor: p.name.clone(),
            });
        }
    }

    if let Some(clip) = state.config.clip_norm {
        let norm = AdamState::global_grad_norm(grads);
        if norm > clip {
            let scale = (clip / norm) as f32;
            for g in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }

    state.step = step;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let eps = cfg.eps as f32;

    let mults: Vec<f64> = model.param_groups().iter().map(|&(_, m)| m).collect();
    for (idx, p) in model.params_mut().iter_mut().enumerate() {
        let lr_eff = (base_lr * mults[idx]) as f32;
        let decay = p.kind == ParamKind::Matrix && cfg.weight_decay > 0.0;
        let wd_factor = 1.0 - lr_eff * cfg.weight_decay as f32;
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let g = &grads[idx];
        let inv_bc1 = (1.0 / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        for ((w, (mi, vi)), &gi) in p
            .data
            .data_mut()
            .iter_mut()
            .zip(m.iter_mut().zip(v.iter_mut()))
            .zip(g.iter())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi * inv_bc1;
            let v_hat = *vi * inv_bc2;
            if decay {
                *w *= wd_factor;
            }
            *w -= lr_eff * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
