//! End-to-end pipelines shared by the command-line tool and the tests.

use crate::config::{DataConfig, ModelConfig, RunConfig};
use crate::evaluate::{calibrate, evaluate, score_samples, Evaluation, Provenance};
use crate::io::checkpoint::Checkpoint;
use crate::io::manifest::{Dataset, Sample};
use crate::io::synthetic::generate_synthetic;
use crate::model::StanModel;
use crate::params::ParamStore;
use crate::train::{train, train_with_hook, LossRecord};
use crate::{Result, StanError};

pub fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    match (&data.manifest, &data.synthetic) {
        (Some(path), None) => Dataset::from_manifest(path),
        (None, Some(spec)) => generate_synthetic(spec),
        (None, None) => Err(StanError::Config("data: no manifest or synthetic spec given".into())),
        (Some(_), Some(_)) => Err(StanError::Config("data: set either manifest or synthetic, not both".into())),
    }
}

/// Checks that a dataset fits the configured classifier width.
pub fn check_dataset(ds: &Dataset, model: &ModelConfig) -> Result<()> {
    let k = model.backbone.num_known_classes;
    if ds.num_known_classes > k {
        return Err(StanError::Data(format!(
            "dataset has {} known classes but backbone.num_known_classes is {k}",
            ds.num_known_classes
        )));
    }
    let side = model.backbone.image_size;
    let all = ds.train.iter().chain(&ds.val).chain(&ds.test_known).chain(&ds.test_unknown);
    if let Some(s) = all.into_iter().find(|s| s.image.shape() != [3, side, side]) {
        return Err(StanError::Data(format!(
            "{} has shape {:?}, model expects [3, {side}, {side}]",
            s.path,
            s.image.shape()
        )));
    }
    Ok(())
}

pub struct TrainedRun {
    pub model: StanModel,
    pub store: ParamStore<f32>,
    pub history: Vec<LossRecord>,
}

impl TrainedRun {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint::from_store(&self.store, &self.model.cfg, seed)
    }
}

pub fn train_run(cfg: &RunConfig, ds: &Dataset) -> Result<TrainedRun> {
    let model_cfg = cfg.model();
    check_dataset(ds, &model_cfg)?;
    let (model, mut store) = StanModel::new(&model_cfg, cfg.seed)?;
    let history = match cfg.optimizer.stop_at_train_acc {
        _ if cfg.optimizer.epochs == 0 => Vec::new(),
        None => train(&model, &mut store, &ds.train, &cfg.optimizer, &cfg.loss, cfg.seed)?,
        Some(target) => {
            let mut hook = |_: usize, store: &ParamStore<f32>, _: &[LossRecord]| -> Result<bool> {
                Ok(train_accuracy(&model, store, &ds.train)? < target)
            };
            train_with_hook(&model, &mut store, &ds.train, &cfg.optimizer, &cfg.loss, cfg.seed, &mut hook)?
        }
    };
    Ok(TrainedRun { model, store, history })
}

/// Share of samples whose scoring-logit argmax equals the label.
pub fn train_accuracy(model: &StanModel, store: &ParamStore<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(StanError::Data("no samples to measure accuracy on".into()));
    }
    let scores = score_samples(model, store, samples, 1)?;
    let hits = samples.iter().zip(&scores).filter(|(s, r)| s.label == Some(r.argmax)).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Rebuilds a model from its configuration and loads checkpoint weights.
pub fn restore(model_cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<(StanModel, ParamStore<f32>)> {
    let (model, mut store) = StanModel::new(model_cfg, ckpt.meta.seed)?;
    ckpt.restore_into(&mut store, model_cfg)?;
    Ok((model, store))
}

/// Threshold source for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Fixed(f64),
    /// Calibrate on the validation split at this TPR.
    Calibrate(f64),
}

pub fn evaluate_run(
    model: &StanModel,
    store: &ParamStore<f32>,
    ds: &Dataset,
    threshold: Threshold,
    provenance: &Provenance,
    threads: usize,
) -> Result<Evaluation> {
    check_dataset(ds, &model.cfg)?;
    let theta = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::Calibrate(tpr) => {
            if ds.val.is_empty() {
                return Err(StanError::Data("calibration needs a non-empty validation split".into()));
            }
            calibrate(model, store, &ds.val, tpr, threads)?
        }
    };
    evaluate(model, store, &ds.test_known, &ds.test_unknown, theta, provenance, threads)
}
