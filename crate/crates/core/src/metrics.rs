//! Closed-set accuracy, AUROC, OSCR and (K+1)-class macro-F1.

use serde::{Deserialize, Serialize};

use crate::head::Prediction;
use crate::{Result, StanError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    /// `None` for unknown-class samples.
    pub true_label: Option<usize>,
    /// Argmax class, ignoring any threshold.
    pub predicted_known_label: usize,
}

impl ScoredSample {
    fn correct(&self) -> bool {
        self.true_label == Some(self.predicted_known_label)
    }
}

fn non_empty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(StanError::Data(format!("{what} is empty")));
    }
    Ok(())
}

fn finite(xs: impl IntoIterator<Item = f64>) -> Result<()> {
    if xs.into_iter().any(|x| !x.is_finite()) {
        return Err(StanError::Numerical("non-finite score".into()));
    }
    Ok(())
}

/// Fraction of known samples whose argmax matches the label.
pub fn acc(samples: &[ScoredSample]) -> Result<f64> {
    non_empty(samples, "known sample list")?;
    if samples.iter().any(|s| s.true_label.is_none()) {
        return Err(StanError::Data("accuracy is defined on known samples only".into()));
    }
    let hits = samples.iter().filter(|s| s.correct()).count();
    Ok(hits as f64 / samples.len() as f64)
}

fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// ROC points `(FPR, TPR)` for the rule `score ≥ t`, one per distinct score,
/// from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(known: &[f64], unknown: &[f64]) -> Result<Vec<(f64, f64)>> {
    non_empty(known, "known score list")?;
    non_empty(unknown, "unknown score list")?;
    finite(known.iter().chain(unknown).copied())?;
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, true))
        .chain(unknown.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / nu, tp as f64 / nk));
    }
    Ok(curve)
}

/// Probability that a known sample outscores an unknown one, ties counted
/// half; computed as the trapezoidal area under [`roc_curve`].
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    Ok(trapezoid(&roc_curve(known, unknown)?))
}

/// OSCR curve `(FPR, CCR)` under the strict rule `score > θ`, with θ swept
/// over every observed score from the largest down and then −∞. The first
/// point is therefore `(0, 0)` and the last `(1, accuracy)`.
pub fn oscr_curve(known: &[ScoredSample], unknown: &[f64]) -> Result<Vec<(f64, f64)>> {
    non_empty(known, "known sample list")?;
    non_empty(unknown, "unknown score list")?;
    finite(known.iter().map(|s| s.score).chain(unknown.iter().copied()))?;
    if known.iter().any(|s| s.true_label.is_none()) {
        return Err(StanError::Data("OSCR known list contains an unknown sample".into()));
    }
    // (score, counts toward CCR, counts toward FPR)
    let mut all: Vec<(f64, bool, bool)> = known
        .iter()
        .map(|s| (s.score, s.correct(), false))
        .chain(unknown.iter().map(|&s| (s, false, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    let (mut cc, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    let mut i = 0;
    // At θ = all[i].0 the accepted set is everything strictly above it,
    // i.e. the groups already consumed.
    while i < all.len() {
        curve.push((fp as f64 / nu, cc as f64 / nk));
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            cc += all[i].1 as usize;
            fp += all[i].2 as usize;
            i += 1;
        }
    }
    curve.push((fp as f64 / nu, cc as f64 / nk));
    Ok(curve)
}

pub fn oscr(known: &[ScoredSample], unknown: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    let curve = oscr_curve(known, unknown)?;
    Ok((trapezoid(&curve), curve))
}

/// F1 averaged over the K known classes plus one unknown class; a class with
/// no true or predicted members scores 0.
pub fn macro_f1(decisions: &[(Option<usize>, Prediction)], k: usize) -> Result<f64> {
    non_empty(decisions, "decision list")?;
    let idx = |label: Option<usize>| -> Result<usize> {
        match label {
            Some(l) if l < k => Ok(l),
            Some(l) => Err(StanError::Data(format!("label {l} outside {k} known classes"))),
            None => Ok(k),
        }
    };
    let mut tp = vec![0usize; k + 1];
    let mut fp = vec![0usize; k + 1];
    let mut fn_ = vec![0usize; k + 1];
    for &(truth, pred) in decisions {
        let t = idx(truth)?;
        let p = idx(match pred {
            Prediction::Known(c) => Some(c),
            Prediction::Unknown => None,
        })?;
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..=k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / (k + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub auroc: f64,
    pub oscr: f64,
    pub macro_f1: f64,
    #[serde(with = "extended_float")]
    pub theta: f64,
    pub num_known: usize,
    pub num_unknown: usize,
    pub config_hash: String,
    pub seed: u64,
    pub roc_curve: Vec<(f64, f64)>,
    pub ccr_fpr_curve: Vec<(f64, f64)>,
}

/// JSON numbers cannot hold infinities, so an infinite threshold is written
/// as the string `"inf"` or `"-inf"`.
mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(de::Error::custom(format!("invalid number {t:?}"))),
            },
        }
    }
}
