//! Decoupled-weight-decay Adam for the backbone group and SGD with momentum
//! and L2 weight decay for everything else.

use stan_tensor::Tensor;

use crate::config::{AdamWConfig, SgdConfig};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::{Result, StanError};

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub adamw: AdamWConfig,
    pub sgd: SgdConfig,
    /// Adam moments or SGD momentum buffer, per parameter.
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
    steps: Vec<u64>,
}

impl Optimizer {
    pub fn new(store: &ParamStore<f32>, adamw: AdamWConfig, sgd: SgdConfig) -> Self {
        Self {
            adamw,
            sgd,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
            steps: vec![0; store.len()],
        }
    }

    /// Applies one update for every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)]) -> Result<()> {
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            if g.shape() != store.get(*id).shape() {
                return Err(StanError::Numerical(format!(
                    "gradient shape {:?} does not match {}",
                    g.shape(),
                    store.name(*id)
                )));
            }
            if !g.is_finite() {
                return Err(StanError::Numerical(format!("non-finite gradient for {}", store.name(*id))));
            }
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i];
            match store.group(*id) {
                ParamGroup::Backbone => {
                    let c = self.adamw;
                    let m = self.first[i].get_or_insert_with(|| vec![0.0; g.numel()]);
                    let v = self.second[i].get_or_insert_with(|| vec![0.0; g.numel()]);
                    let bc1 = 1.0 - c.beta1.powi(t as i32);
                    let bc2 = 1.0 - c.beta2.powi(t as i32);
                    let p = store.get_mut(*id).data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j] as f64;
                        let mut pj = p[j] as f64;
                        pj -= c.lr * c.weight_decay * pj;
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        pj -= c.lr * mhat / (vhat.sqrt() + c.eps);
                        p[j] = pj as f32;
                    }
                }
                ParamGroup::Rest => {
                    let c = self.sgd;
                    let first = self.first[i].is_none();
                    let buf = self.first[i].get_or_insert_with(|| vec![0.0; g.numel()]);
                    let p = store.get_mut(*id).data_mut();
                    for j in 0..p.len() {
                        let mut pj = p[j] as f64;
                        let d = g.data()[j] as f64 + c.weight_decay * pj;
                        buf[j] = if first { d } else { c.momentum * buf[j] + d };
                        pj -= c.lr * buf[j];
                        p[j] = pj as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
