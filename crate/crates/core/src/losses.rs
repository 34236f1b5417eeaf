//! Alignment, preservation and combined training losses.
//!
//! All losses return their value together with the gradient w.r.t. the
//! agent's embedding rows. Context targets are constants: no gradient is
//! produced for them.

use serde::{Deserialize, Serialize};

use crate::diffuser::ContextBatch;
use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;
use crate::numerics::{dot, norm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Distance {
    /// Per-row mean of squared differences, averaged over rows.
    #[default]
    SquaredErrorMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub distance: Distance,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            temperature: 0.1,
            distance: Distance::SquaredErrorMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                "lambda",
                format!("{} is outside [0, 1]", self.lambda),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "temperature",
                format!("{} must be positive", self.temperature),
            ));
        }
        Ok(())
    }
}

/// Value and embedding gradient of a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Mat,
}

/// Breakdown returned by [`total_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub align: f64,
    pub pres: f64,
    pub grad: Mat,
}

pub fn align_loss(batch: &EmbeddingBatch, ctx: &ContextBatch) -> Result<LossOutput> {
    if batch.indices != ctx.indices {
        return Err(Error::Contract(format!(
            "context for agent {} covers indices {:?}..{:?}, batch covers {:?}..{:?}",
            batch.agent_id,
            ctx.indices.first(),
            ctx.indices.last(),
            batch.indices.first(),
            batch.indices.last()
        )));
    }
    let e = &batch.embeddings;
    let c = &ctx.embeddings;
    if e.shape() != c.shape() {
        return Err(Error::shape(
            "context embeddings",
            format!("{}x{}", e.rows(), e.cols()),
            format!("{}x{}", c.rows(), c.cols()),
        ));
    }
    let n = (e.rows() * e.cols()).max(1) as f64;
    let mut grad = Mat::zeros(e.rows(), e.cols());
    let mut value = 0.0;
    for ((g, a), b) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(e.as_slice())
        .zip(c.as_slice())
    {
        let d = a - b;
        value += d * d;
        *g = 2.0 * d / n;
    }
    Ok(LossOutput {
        value: value / n,
        grad,
    })
}

/// InfoNCE over one agent's batch with the next window as the positive.
///
/// Anchor `t` in `0..B-1` scores every other row `j` by cosine similarity
/// over `temperature`; the loss is the mean cross-entropy of picking `t+1`.
pub fn pres_loss(batch: &EmbeddingBatch, temperature: f64) -> Result<LossOutput> {
    let e = &batch.embeddings;
    let b = e.rows();
    if b < 2 {
        return Err(Error::Precondition(format!(
            "preservation loss needs at least 2 embeddings, agent {} has {b}",
            batch.agent_id
        )));
    }
    let d = e.cols();
    let mut unit = Mat::zeros(b, d);
    let mut norms = Vec::with_capacity(b);
    for r in 0..b {
        let row = e.row(r);
        let len = norm(row);
        if !len.is_finite() || len <= 0.0 {
            return Err(Error::Numeric(format!(
                "embedding {} of agent {} has norm {len}",
                batch.indices.get(r).copied().unwrap_or(r),
                batch.agent_id
            )));
        }
        norms.push(len);
        unit.row_mut(r)
            .iter_mut()
            .zip(row)
            .for_each(|(u, x)| *u = x / len);
    }

    let anchors = (b - 1) as f64;
    let mut value = 0.0;
    let mut d_unit = Mat::zeros(b, d);
    let mut logits = vec![0.0; b];
    for t in 0..b - 1 {
        for (j, logit) in logits.iter_mut().enumerate() {
            *logit = if j == t {
                f64::NEG_INFINITY
            } else {
                dot(unit.row(t), unit.row(j)) / temperature
            };
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|s| (s - max).exp()).sum();
        let log_z = max + sum.ln();
        value += log_z - logits[t + 1];

        // d/ds_tj = p_tj - [j == t+1]; ds_tj/du_t = u_j/τ, ds_tj/du_j = u_t/τ
        for j in 0..b {
            if j == t {
                continue;
            }
            let mut coeff = (logits[j] - log_z).exp();
            if j == t + 1 {
                coeff -= 1.0;
            }
            let coeff = coeff / (anchors * temperature);
            for k in 0..d {
                d_unit[(t, k)] += coeff * unit[(j, k)];
                d_unit[(j, k)] += coeff * unit[(t, k)];
            }
        }
    }

    // Through u = e/|e|: de = (du - u (u·du)) / |e|
    let mut grad = Mat::zeros(b, d);
    for (r, len) in norms.iter().enumerate() {
        let u = unit.row(r);
        let du = d_unit.row(r);
        let proj = dot(u, du);
        for ((g, uk), duk) in grad.row_mut(r).iter_mut().zip(u).zip(du) {
            *g = (duk - uk * proj) / len;
        }
    }
    Ok(LossOutput {
        value: value / anchors,
        grad,
    })
}

/// `λ·align + (1−λ)·pres` with the matching gradient combination.
pub fn total_loss(
    batch: &EmbeddingBatch,
    ctx: &ContextBatch,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let align = align_loss(batch, ctx)?;
    let pres = pres_loss(batch, cfg.temperature)?;
    let lambda = cfg.lambda;
    let mut grad = align.grad;
    for (g, p) in grad.as_mut_slice().iter_mut().zip(pres.grad.as_slice()) {
        *g = lambda * *g + (1.0 - lambda) * p;
    }
    Ok(TotalLoss {
        value: lambda * align.value + (1.0 - lambda) * pres.value,
        align: align.value,
        pres: pres.value,
        grad,
    })
}
