//! Minibatch training on the joint loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, OptimizerConfig};
use crate::head::total_loss;
use crate::io::manifest::Sample;
use crate::model::StanModel;
use crate::optim::Optimizer;
use crate::params::{Ctx, ParamStore};
use crate::{Result, StanError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub loss_s: f64,
    /// Absent for the backbone-only variant.
    pub loss_st: Option<f64>,
}

/// Per-epoch hook: return `false` to stop early.
pub type EpochHook<'a> = dyn FnMut(usize, &ParamStore<f32>, &[LossRecord]) -> Result<bool> + 'a;

/// Trains `store` in place and returns the per-step loss history.
pub fn train(
    model: &StanModel,
    store: &mut ParamStore<f32>,
    data: &[Sample],
    opt: &OptimizerConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    train_with_hook(model, store, data, opt, loss, seed, &mut |_, _, _| Ok(true))
}

pub fn train_with_hook(
    model: &StanModel,
    store: &mut ParamStore<f32>,
    data: &[Sample],
    opt: &OptimizerConfig,
    loss: &LossConfig,
    seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<LossRecord>> {
    opt.validate()?;
    if !(loss.lambda >= 0.0) {
        return Err(StanError::Config(format!("loss.lambda must be non-negative, got {}", loss.lambda)));
    }
    if data.is_empty() {
        return Err(StanError::Data("training set is empty".into()));
    }
    let labels: Vec<usize> = data
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| StanError::Data(format!("{} is an unknown-class sample in the training set", s.path)))
        })
        .collect::<Result<_>>()?;
    let mut optimizer = Optimizer::new(store, opt.backbone, opt.rest);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opt.batch_size) {
            let images: Vec<_> = batch.iter().map(|&i| &data[i].image).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut ctx = Ctx::new(store, true);
                let out = model.forward_batch(&mut ctx, &images)?;
                let terms = total_loss(&mut ctx.g, out.logits_s, out.logits_st, &y, loss.lambda)?;
                let value = ctx.g.value(terms.total).data()[0] as f64;
                if !value.is_finite() {
                    return Err(StanError::Numerical(format!("loss became {value} at epoch {epoch}, step {step}")));
                }
                history.push(LossRecord {
                    epoch,
                    step,
                    loss: value,
                    loss_s: ctx.g.value(terms.spatial).data()[0] as f64,
                    loss_st: terms.spatial_temporal.map(|v| ctx.g.value(v).data()[0] as f64),
                });
                ctx.g.backward(terms.total)?;
                ctx.param_grads()
            };
            optimizer.step(store, &grads)?;
            step += 1;
        }
        if !hook(epoch, store, &history)? {
            break;
        }
    }
    Ok(history)
}

/// Mean loss of each epoch.
pub fn epoch_means(history: &[LossRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in history {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.loss;
        out[r.epoch].1 += 1;
    }
    out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// `epoch,step,loss,loss_s,loss_st` CSV.
pub fn history_csv(history: &[LossRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let err = |e: csv::Error| StanError::Data(format!("loss history csv: {e}"));
    w.write_record(["epoch", "step", "loss", "loss_s", "loss_st"]).map_err(err)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:.8e}", r.loss),
            format!("{:.8e}", r.loss_s),
            r.loss_st.map(|v| format!("{v:.8e}")).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| StanError::Data(format!("loss history csv: {e}")))
}
