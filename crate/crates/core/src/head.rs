//! Joint loss, max-logit scoring, thresholded prediction and threshold
//! calibration.

use serde::{Deserialize, Serialize};
use stan_tensor::{Graph, Real, Var};

use crate::{Result, StanError};

pub struct LossTerms {
    pub total: Var,
    pub spatial: Var,
    pub spatial_temporal: Option<Var>,
}

/// `L = L_S + λ·L_ST`; without a C_ST branch the loss is `L_S` alone.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    logits_s: Var,
    logits_st: Option<Var>,
    labels: &[usize],
    lambda: f64,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) {
        return Err(StanError::Config(format!("loss.lambda must be non-negative, got {lambda}")));
    }
    let spatial = g.cross_entropy(logits_s, labels)?;
    let Some(st) = logits_st else {
        return Ok(LossTerms {
            total: spatial,
            spatial,
            spatial_temporal: None,
        });
    };
    let l_st = g.cross_entropy(st, labels)?;
    let weighted = g.scale(l_st, lambda)?;
    let total = g.add(spatial, weighted)?;
    Ok(LossTerms {
        total,
        spatial,
        spatial_temporal: Some(l_st),
    })
}

/// Maximum logit.
pub fn open_set_score<T: Real>(logits: &[T]) -> Result<T> {
    let (_, s) = argmax(logits)?;
    Ok(s)
}

/// First index of the maximum, and the maximum.
pub fn argmax<T: Real>(logits: &[T]) -> Result<(usize, T)> {
    let mut it = logits.iter().copied().enumerate();
    let first = it.next().ok_or_else(|| StanError::Data("empty logit vector".into()))?;
    Ok(it.fold(first, |best, (i, v)| if v > best.1 { (i, v) } else { best }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Known(usize),
    Unknown,
}

impl Prediction {
    /// Known index, or −1 for unknown.
    pub fn label(self) -> i64 {
        match self {
            Prediction::Known(k) => k as i64,
            Prediction::Unknown => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub score: f64,
    pub predicted: Prediction,
    pub theta: f64,
}

/// Known class if the max logit is strictly above `theta`, else unknown.
pub fn predict<T: Real>(logits: &[T], theta: f64) -> Result<Decision> {
    if theta.is_nan() {
        return Err(StanError::Config("threshold is NaN".into()));
    }
    let (k, s) = argmax(logits)?;
    let score = s.as_f64();
    let predicted = if score > theta { Prediction::Known(k) } else { Prediction::Unknown };
    Ok(Decision { score, predicted, theta })
}

/// Largest threshold that keeps at least `ceil(target_tpr·n)` of the known
/// validation scores strictly above it. Prefers an observed score; falls back
/// to the next float below a score when ties or `target_tpr = 1` leave no
/// observed value that works.
pub fn calibrate_threshold(scores: &[f64], target_tpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(StanError::Data("no validation scores to calibrate on".into()));
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(StanError::Config(format!("target_tpr must lie in (0, 1], got {target_tpr}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(StanError::Numerical("non-finite validation score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let keep = ((target_tpr * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let last_kept = sorted[keep - 1];
    match sorted.get(keep) {
        Some(&next) if next < last_kept => Ok(next),
        _ => Ok(last_kept.next_down()),
    }
}
