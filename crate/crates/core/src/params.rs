//! Named parameter storage and per-forward binding onto a gradient tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stan_tensor::{Graph, Real, Tensor, Var};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Backbone blocks and the spatial classifier C_S.
    Backbone,
    /// SFSO, STFL, CA and the spatial-temporal classifier C_ST.
    Rest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        if self.names[id.0].starts_with("backbone.") {
            ParamGroup::Backbone
        } else {
            ParamGroup::Rest
        }
    }

    /// Top-level module of a parameter (`backbone`, `sfso`, `stfl`, `ca`, `head`).
    pub fn module(&self, id: ParamId) -> &str {
        self.names[id.0].split('.').next().unwrap_or("")
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids().map(move |id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Deterministic parameter initializer.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in ±1/sqrt(fan_in).
    pub fn fan_in(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound)).expect("positive shape");
        self.store.add(name, t, true)
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: f32) -> ParamId {
        let t = Tensor::full(shape, value).expect("positive shape");
        self.store.add(name, t, true)
    }

    pub fn normal(&mut self, name: String, shape: Vec<usize>, std: f64, trainable: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng) as f32).expect("positive shape");
        self.store.add(name, t, trainable)
    }
}

/// A forward pass in progress: a fresh tape plus lazily bound parameters.
pub struct Ctx<'s, T: Real> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'s, T: Real> Ctx<'s, T> {
    /// `track` marks trainable parameters as requiring gradients.
    pub fn new(store: &'s ParamStore<T>, track: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Binds a parameter once per tape; repeated uses share one leaf so
    /// gradients accumulate across samples.
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let requires = self.track && self.store.is_trainable(id);
        let v = self.g.leaf(self.store.get(id).clone(), requires)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: &Tensor<f32>) -> Result<Var> {
        Ok(self.g.constant(t.cast())?)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.g.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

/// Fully connected layer `y = x·W + b` with `W[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, input: usize, output: usize) -> Self {
        Self::with_bias(init, name, input, output, 0.0)
    }

    pub(crate) fn with_bias(init: &mut Init<'_>, name: &str, input: usize, output: usize, bias: f32) -> Self {
        let w = init.fan_in(format!("{name}.weight"), vec![input, output], input);
        let b = init.constant(format!("{name}.bias"), vec![output], bias);
        Self { w, b, input, output }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w)?;
        let b = ctx.p(self.b)?;
        Ok(ctx.g.linear(x, w, b)?)
    }
}
