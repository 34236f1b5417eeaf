use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment accumulators, one vector per parameter block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params<P: Parameters + ?Sized>(params: &P) -> Self {
        let shapes: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn matches<P: Parameters + ?Sized>(&self, params: &P) -> bool {
        let blocks = params.blocks();
        blocks.len() == self.m.len()
            && blocks.len() == self.v.len()
            && blocks
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, b), (m, v))| b.len() == m.len() && b.len() == v.len())
    }
}

/// One bias-corrected Adam update applied in place.
///
/// Gradients are checked for finiteness before anything is written, so a
/// failed step leaves both `params` and `state` untouched.
pub fn adam_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || cfg.eps <= 0.0 {
        return Err(Error::Precondition(format!(
            "adam hyperparameters out of range: beta1={} beta2={} eps={}",
            cfg.beta1, cfg.beta2, cfg.eps
        )));
    }
    let grad_blocks = grads.blocks();
    if !state.matches(params) || !state.matches(grads) {
        return Err(Error::shape(
            "adam state",
            "moment shapes mirroring the parameter blocks",
            "mismatched blocks",
        ));
    }
    for (name, g) in &grad_blocks {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                block: (*name).to_string(),
            });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    for (((_, p), (_, g)), (m, v)) in params
        .blocks_mut()
        .into_iter()
        .zip(grad_blocks)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
