//! Finite-difference sweep over every trainable parameter of a whole model.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stan_tensor::gradcheck::relative_error;
use stan_tensor::{Tensor, Var};

use crate::config::ModelConfig;
use crate::head::total_loss;
use crate::model::StanModel;
use crate::params::{Ctx, ParamStore};
use crate::{Result, StanError};

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub eps: f64,
    /// Relative-error denominator floor.
    pub floor: f64,
    pub lambda: f64,
    pub batch: usize,
    pub seed: u64,
    /// Deliberately corrupts the analytic gradient (checker self-test).
    pub sabotage: bool,
    /// Checks at most this many seeded random elements of each tensor.
    pub max_per_tensor: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
            lambda: 1.0,
            batch: 2,
            seed: 0,
            sabotage: false,
            max_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleError {
    pub module: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub modules: Vec<ModuleError>,
}

impl SweepReport {
    pub fn max_rel_error(&self) -> f64 {
        self.modules.iter().map(|m| m.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.modules.iter().map(|m| m.checked).sum()
    }
}

/// Random images of the configured size and labels cycling through classes.
pub fn probe_batch(cfg: &ModelConfig, n: usize, seed: u64) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("valid std");
    let side = cfg.backbone.image_size;
    let images = (0..n)
        .map(|_| Tensor::from_fn(vec![3, side, side], |_| normal.sample(&mut rng)).expect("positive shape"))
        .collect();
    let labels = (0..n).map(|i| i % cfg.backbone.num_known_classes).collect();
    (images, labels)
}


/// Compares the tape gradient of the scalar `f` against central differences
/// for every element of every trainable parameter accepted by `select`.
/// Results are grouped by top-level module.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    select: impl Fn(&str) -> bool,
    f: F,
    eps: f64,
    floor: f64,
    sabotage: bool,
) -> Result<SweepReport>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    check_params_sampled(store, select, f, eps, floor, sabotage, None)
}

#[allow(clippy::too_many_arguments)]
/// [`check_params`] restricted to `max_per_tensor` elements of each tensor,
/// drawn from a generator seeded with `limit.1`.
pub fn check_params_sampled<F>(
    store: &mut ParamStore<f64>,
    select: impl Fn(&str) -> bool,
    f: F,
    eps: f64,
    floor: f64,
    sabotage: bool,
    limit: Option<(usize, u64)>,
) -> Result<SweepReport>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(limit.map_or(0, |l| l.1));
    let grads = {
        let mut ctx = Ctx::new(store, true);
        ctx.g.set_sabotage(sabotage);
        let loss = f(&mut ctx)?;
        ctx.g.backward(loss)?;
        ctx.param_grads()
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(store, false);
        let loss = f(&mut ctx)?;
        Ok(ctx.g.value(loss).data()[0])
    };

    let mut modules: Vec<ModuleError> = Vec::new();
    for (id, grad) in grads {
        let name = store.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let module = store.module(id).to_string();
        let slot = match modules.iter().position(|m| m.module == module) {
            Some(i) => i,
            None => {
                modules.push(ModuleError {
                    module,
                    max_rel_error: 0.0,
                    worst_param: String::new(),
                    checked: 0,
                });
                modules.len() - 1
            }
        };
        let elements: Vec<usize> = match limit {
            Some((m, _)) if m < grad.numel() => sample(&mut rng, grad.numel(), m).into_vec(),
            _ => (0..grad.numel()).collect(),
        };
        for j in elements {
            let orig = store.get(id).data()[j];
            let (up, down) = (orig + eps, orig - eps);
            store.get_mut(id).data_mut()[j] = up;
            let f_up = eval(store);
            store.get_mut(id).data_mut()[j] = down;
            let f_down = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (f_up? - f_down?) / (up - down);
            let err = relative_error(grad.data()[j], numeric, floor);
            let m = &mut modules[slot];
            m.checked += 1;
            if m.worst_param.is_empty() || err > m.max_rel_error {
                m.max_rel_error = err;
                m.worst_param = format!("{name}[{j}]");
            }
        }
    }
    Ok(SweepReport { modules })
}

/// Full-model sweep of the joint loss on a small random batch, in 64-bit
/// arithmetic.
pub fn sweep(cfg: &ModelConfig, opts: &SweepOptions) -> Result<SweepReport> {
    if opts.batch == 0 {
        return Err(StanError::Config("gradient check batch must be non-empty".into()));
    }
    let (model, store32) = StanModel::new(cfg, opts.seed)?;
    let mut store: ParamStore<f64> = store32.cast();
    let (images, labels) = probe_batch(cfg, opts.batch, opts.seed.wrapping_add(1));
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    check_params_sampled(
        &mut store,
        |_| true,
        |ctx| {
            let out = model.forward_batch(ctx, &refs)?;
            Ok(total_loss(&mut ctx.g, out.logits_s, out.logits_st, &labels, opts.lambda)?.total)
        },
        opts.eps,
        opts.floor,
        opts.sabotage,
        opts.max_per_tensor.map(|m| (m, opts.seed)),
    )
}
