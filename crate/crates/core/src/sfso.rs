//! Spatial feature self-organizing: projects the pyramid to one common
//! `[D, S, S]` size and folds higher levels into lower ones by attention.

use stan_tensor::{Real, Var};

use crate::backbone::{map_to_tokens, tokens_to_map, FeaturePyramid};
use crate::config::{BackboneConfig, ResolvedDims};
use crate::params::{Ctx, Init, Linear, ParamId};
use crate::{Result, StanError};

/// Four same-shape maps `[D, S, S]`, moment order 1..4.
#[derive(Debug, Clone, Copy)]
pub struct ReorganizedSequence {
    pub maps: [Var; 4],
}

/// Per-level convolution to the common channel count.
#[derive(Debug, Clone, Copy)]
pub struct LevelProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

/// Single-head attention with its own query/key/value/output maps.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttention {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            o: Linear::new(init, &format!("{name}.o"), dim, dim),
        }
    }

    /// `query[n, D]`, `context[m, D]` → `(out[n, D], weights[n, m])`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, query: Var, context: Var) -> Result<(Var, Var)> {
        let dim = self.q.input;
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, context)?;
        let v = self.v.forward(ctx, context)?;
        let kt = ctx.g.transpose(k)?;
        let scores = ctx.g.matmul(q, kt)?;
        let scores = ctx.g.scale(scores, 1.0 / (dim as f64).sqrt())?;
        let weights = ctx.g.softmax(scores)?;
        let mixed = ctx.g.matmul(weights, v)?;
        let out = self.o.forward(ctx, mixed)?;
        Ok((out, weights))
    }
}

#[derive(Debug, Clone)]
pub struct Sfso {
    pub projections: [LevelProjection; 4],
    /// Attention folding level t+1 into level t, for t = 1, 2, 3.
    pub attention: [CrossAttention; 3],
    pub channels: usize,
    pub side: usize,
}

impl Sfso {
    pub(crate) fn new(init: &mut Init<'_>, backbone: &BackboneConfig, dims: &ResolvedDims, kernel: usize) -> Self {
        let d = dims.common_channels;
        let projections = std::array::from_fn(|i| {
            let c = backbone.stage_channels[i];
            let weight = init.fan_in(
                format!("sfso.level{}.conv.weight", i + 1),
                vec![d, c, kernel, kernel],
                c * kernel * kernel,
            );
            let bias = init.constant(format!("sfso.level{}.conv.bias", i + 1), vec![d], 0.0);
            LevelProjection { weight, bias, kernel }
        });
        let attention = std::array::from_fn(|i| CrossAttention::new(init, &format!("sfso.attn{}", i + 1), d));
        Self {
            projections,
            attention,
            channels: d,
            side: dims.common_side,
        }
    }

    /// Convolution to `D` channels, then max-pooling down to side `S`.
    pub fn project_to_common<T: Real>(&self, ctx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid) -> Result<[Var; 4]> {
        let mut out = Vec::with_capacity(4);
        for (level, (proj, &map)) in self.projections.iter().zip(&pyramid.maps).enumerate() {
            let shape = ctx.g.shape(map).to_vec();
            if shape.len() != 3 || shape[1] != shape[2] {
                return Err(StanError::Data(format!("pyramid level {} is not a square map: {shape:?}", level + 1)));
            }
            let side = shape[1];
            if side < self.side || side % self.side != 0 {
                return Err(StanError::Data(format!(
                    "pyramid level {} side {side} cannot pool to common side {}",
                    level + 1,
                    self.side
                )));
            }
            let w = ctx.p(proj.weight)?;
            let b = ctx.p(proj.bias)?;
            let x = ctx.g.conv2d(map, w, 1, proj.kernel / 2)?;
            let mut x = ctx.g.add_channel_bias(x, b)?;
            if side > self.side {
                let k = side / self.side;
                x = ctx.g.maxpool2d(x, k, k)?;
            }
            out.push(x);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// `r_4 = c_4`, and `r_t = c_t + attn(c_t, r_{t+1})` going down.
    pub fn high_to_low_aggregate<T: Real>(&self, ctx: &mut Ctx<'_, T>, common: [Var; 4]) -> Result<ReorganizedSequence> {
        let shape = ctx.g.shape(common[0]).to_vec();
        for (i, &c) in common.iter().enumerate() {
            if ctx.g.shape(c) != shape.as_slice() {
                return Err(StanError::Data(format!(
                    "common map {} has shape {:?}, expected {shape:?}",
                    i + 1,
                    ctx.g.shape(c)
                )));
            }
        }
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(StanError::Data(format!("common maps must be [{}, S, S], got {shape:?}", self.channels)));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut maps = common;
        let mut higher = map_to_tokens(ctx, common[3])?;
        for t in (0..3).rev() {
            let lower = map_to_tokens(ctx, common[t])?;
            let (mixed, _) = self.attention[t].forward(ctx, lower, higher)?;
            let r = ctx.g.add(lower, mixed)?;
            maps[t] = tokens_to_map(ctx, r, h, w)?;
            higher = r;
        }
        Ok(ReorganizedSequence { maps })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid) -> Result<ReorganizedSequence> {
        let common = self.project_to_common(ctx, pyramid)?;
        self.high_to_low_aggregate(ctx, common)
    }
}
