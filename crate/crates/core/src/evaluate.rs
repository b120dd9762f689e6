//! Scoring, threshold calibration and metric reports.

use std::thread;

use crate::head::{argmax, calibrate_threshold, predict, Prediction};
use crate::io::manifest::Sample;
use crate::io::scores_csv::ScoreRow;
use crate::metrics::{acc, auroc, macro_f1, oscr, roc_curve, MetricReport, ScoredSample};
use crate::model::StanModel;
use crate::params::ParamStore;
use crate::{Result, StanError};

/// Worker count from `STAN_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("STAN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(StanError::Config(format!("STAN_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub logits: Vec<f32>,
    pub score: f32,
    pub argmax: usize,
}

/// Scores every sample; results keep the input order whatever the worker
/// count.
pub fn score_samples(
    model: &StanModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
    threads: usize,
) -> Result<Vec<SampleScore>> {
    let one = |s: &Sample| -> Result<SampleScore> {
        let logits = model.infer(store, &s.image)?;
        let (k, score) = argmax(&logits)?;
        if !score.is_finite() {
            return Err(StanError::Numerical(format!("non-finite score for {}", s.path)));
        }
        Ok(SampleScore { logits, score, argmax: k })
    };
    let threads = threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return samples.iter().map(one).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("scoring worker panicked")?);
        }
        Ok(out)
    })
}

/// Threshold keeping `target_tpr` of the known validation samples.
pub fn calibrate(
    model: &StanModel,
    store: &ParamStore<f32>,
    val: &[Sample],
    target_tpr: f64,
    threads: usize,
) -> Result<f64> {
    let scores = score_samples(model, store, val, threads)?;
    let s: Vec<f64> = scores.iter().map(|s| s.score as f64).collect();
    calibrate_threshold(&s, target_tpr)
}

pub struct Evaluation {
    pub report: MetricReport,
    /// Known samples first, then unknown, in input order.
    pub rows: Vec<ScoreRow>,
}

/// Provenance fields embedded in reports.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

pub fn evaluate(
    model: &StanModel,
    store: &ParamStore<f32>,
    known: &[Sample],
    unknown: &[Sample],
    theta: f64,
    provenance: &Provenance,
    threads: usize,
) -> Result<Evaluation> {
    if theta.is_nan() {
        return Err(StanError::Config("threshold is NaN".into()));
    }
    if known.iter().any(|s| s.label.is_none()) || unknown.iter().any(|s| s.label.is_some()) {
        return Err(StanError::Data("known and unknown test sets are mixed".into()));
    }
    let ks = score_samples(model, store, known, threads)?;
    let us = score_samples(model, store, unknown, threads)?;
    let known_scored: Vec<ScoredSample> = known
        .iter()
        .zip(&ks)
        .map(|(s, r)| ScoredSample {
            score: r.score as f64,
            true_label: s.label,
            predicted_known_label: r.argmax,
        })
        .collect();
    let unknown_scores: Vec<f64> = us.iter().map(|r| r.score as f64).collect();
    let known_scores: Vec<f64> = known_scored.iter().map(|s| s.score).collect();

    let mut decisions: Vec<(Option<usize>, Prediction)> = Vec::with_capacity(ks.len() + us.len());
    for (s, r) in known.iter().chain(unknown).zip(ks.iter().chain(&us)) {
        decisions.push((s.label, predict(&r.logits, theta)?.predicted));
    }
    let (oscr_value, ccr_fpr_curve) = oscr(&known_scored, &unknown_scores)?;
    let report = MetricReport {
        acc: acc(&known_scored)?,
        auroc: auroc(&known_scores, &unknown_scores)?,
        oscr: oscr_value,
        macro_f1: macro_f1(&decisions, model.num_classes())?,
        theta,
        num_known: known.len(),
        num_unknown: unknown.len(),
        config_hash: provenance.config_hash.clone(),
        seed: provenance.seed,
        roc_curve: roc_curve(&known_scores, &unknown_scores)?,
        ccr_fpr_curve,
    };
    let rows = known
        .iter()
        .chain(unknown)
        .zip(ks.iter().chain(&us))
        .map(|(s, r)| ScoreRow {
            path: s.path.clone(),
            true_label: s.label_code(),
            pred_label: r.argmax as i64,
            score: r.score,
        })
        .collect();
    Ok(Evaluation { report, rows })
}
