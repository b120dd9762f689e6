//! Four-stage windowed self-attention backbone with the spatial classifier C_S.
//!
//! Feature maps cross module boundaries as `[C, H, W]`; inside a stage the
//! backbone works on token-major `[H·W, C]` matrices.

use stan_tensor::{index, Real, Var};

use crate::config::BackboneConfig;
use crate::params::{Ctx, Init, Linear, ParamId};
use crate::{Result, StanError};

/// Outputs of the four backbone stages, `[C_i, H_i, W_i]` with halving sides
/// and doubling channels.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub maps: [Var; 4],
}

/// One pre-activation-free transformer block: windowed multi-head
/// self-attention with residual, then a two-layer GELU MLP with residual.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    pub qkv: Linear,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub channels: usize,
}

pub struct BlockOutput {
    pub out: Var,
    /// Attention weights `[windows·heads, n, n]`, rows sum to one.
    pub attention: Var,
}

/// Token indices (row-major over the grid) listed window by window.
fn window_order(side: usize, win: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(side * side);
    for wy in 0..side / win {
        for wx in 0..side / win {
            for ty in 0..win {
                for tx in 0..win {
                    order.push((wy * win + ty) * side + wx * win + tx);
                }
            }
        }
    }
    order
}

impl WindowBlock {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, channels: usize, heads: usize, mlp_ratio: usize) -> Self {
        let hidden = channels * mlp_ratio;
        Self {
            qkv: Linear::new(init, &format!("{name}.qkv"), channels, 3 * channels),
            proj: Linear::new(init, &format!("{name}.proj"), channels, channels),
            fc1: Linear::new(init, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, channels),
            heads,
            channels,
        }
    }

    /// `tokens[side², C]` → same shape.
    pub fn forward_tokens<T: Real>(&self, ctx: &mut Ctx<'_, T>, tokens: Var, side: usize, window: usize) -> Result<BlockOutput> {
        let c = self.channels;
        if window == 0 || side % window != 0 {
            return Err(StanError::Data(format!("window {window} does not divide grid side {side}")));
        }
        if ctx.g.shape(tokens) != [side * side, c] {
            return Err(StanError::Data(format!(
                "block expects [{}, {c}] tokens, got {:?}",
                side * side,
                ctx.g.shape(tokens)
            )));
        }
        let heads = self.heads;
        let dh = c / heads;
        let n = window * window;
        let windows = (side / window) * (side / window);
        let order = window_order(side, window);

        let qkv = self.qkv.forward(ctx, tokens)?;
        let width = 3 * c;
        let mut q_idx = Vec::with_capacity(side * side * c);
        let mut kt_idx = Vec::with_capacity(side * side * c);
        let mut v_idx = Vec::with_capacity(side * side * c);
        for w in 0..windows {
            let toks = &order[w * n..(w + 1) * n];
            for h in 0..heads {
                for &tok in toks {
                    for d in 0..dh {
                        q_idx.push(tok * width + h * dh + d);
                        v_idx.push(tok * width + 2 * c + h * dh + d);
                    }
                }
                for d in 0..dh {
                    for &tok in toks {
                        kt_idx.push(tok * width + c + h * dh + d);
                    }
                }
            }
        }
        let bh = windows * heads;
        let q = ctx.g.gather(qkv, q_idx, vec![bh, n, dh])?;
        let kt = ctx.g.gather(qkv, kt_idx, vec![bh, dh, n])?;
        let v = ctx.g.gather(qkv, v_idx, vec![bh, n, dh])?;
        let scores = ctx.g.bmm(q, kt)?;
        let scores = ctx.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attention = ctx.g.softmax(scores)?;
        let mixed = ctx.g.bmm(attention, v)?;

        // Back to grid order: token `tok`, channel h·dh+d.
        let mut back = vec![0; side * side * c];
        for w in 0..windows {
            for h in 0..heads {
                for (t, &tok) in order[w * n..(w + 1) * n].iter().enumerate() {
                    for d in 0..dh {
                        back[tok * c + h * dh + d] = ((w * heads + h) * n + t) * dh + d;
                    }
                }
            }
        }
        let mixed = ctx.g.gather(mixed, back, vec![side * side, c])?;
        let attn_out = self.proj.forward(ctx, mixed)?;
        let x = ctx.g.add(tokens, attn_out)?;

        let hidden = self.fc1.forward(ctx, x)?;
        let hidden = ctx.g.gelu(hidden)?;
        let mlp = self.fc2.forward(ctx, hidden)?;
        let out = ctx.g.add(x, mlp)?;
        Ok(BlockOutput { out, attention })
    }
}

/// Converts `[C, H, W]` to `[H·W, C]`.
pub fn map_to_tokens<T: Real>(ctx: &mut Ctx<'_, T>, map: Var) -> Result<Var> {
    let s = ctx.g.shape(map).to_vec();
    if s.len() != 3 {
        return Err(StanError::Data(format!("expected [C,H,W] map, got {s:?}")));
    }
    Ok(ctx.g.gather(map, index::map_to_tokens(s[0], s[1], s[2]), vec![s[1] * s[2], s[0]])?)
}

/// Converts `[H·W, C]` to `[C, H, W]`.
pub fn tokens_to_map<T: Real>(ctx: &mut Ctx<'_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = ctx.g.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(StanError::Data(format!("expected [{}, C] tokens, got {s:?}", h * w)));
    }
    Ok(ctx.g.gather(tokens, index::tokens_to_map(s[1], h, w), vec![s[1], h, w])?)
}

/// Windowed attention block applied to a `[C, H, W]` map.
pub fn window_attention_block<T: Real>(
    ctx: &mut Ctx<'_, T>,
    block: &WindowBlock,
    x: Var,
    window: usize,
) -> Result<BlockOutput> {
    let s = ctx.g.shape(x).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(StanError::Data(format!("expected square [C,H,W] map, got {s:?}")));
    }
    let tokens = map_to_tokens(ctx, x)?;
    let BlockOutput { out, attention } = block.forward_tokens(ctx, tokens, s[1], window)?;
    let out = tokens_to_map(ctx, out, s[1], s[2])?;
    Ok(BlockOutput { out, attention })
}

/// 2×2 patch merging on tokens: `[side², C]` → `[(side/2)², 2C]`.
fn merge_tokens<T: Real>(ctx: &mut Ctx<'_, T>, merge: &Linear, tokens: Var, side: usize) -> Result<Var> {
    let c = ctx.g.shape(tokens)[1];
    if side % 2 != 0 {
        return Err(StanError::Data(format!("cannot downsample odd side {side}")));
    }
    let half = side / 2;
    let mut idx = Vec::with_capacity(side * side * c);
    for i in 0..half {
        for j in 0..half {
            // Neighbourhood order (0,0), (1,0), (0,1), (1,1).
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let tok = (2 * i + dy) * side + 2 * j + dx;
                idx.extend((0..c).map(|ch| tok * c + ch));
            }
        }
    }
    let gathered = ctx.g.gather(tokens, idx, vec![half * half, 4 * c])?;
    merge.forward(ctx, gathered)
}

/// `[C, H, W]` → `[2C, H/2, W/2]` by 2×2 neighbourhood concatenation and a
/// linear reduction.
pub fn downsample<T: Real>(ctx: &mut Ctx<'_, T>, merge: &Linear, x: Var) -> Result<Var> {
    let s = ctx.g.shape(x).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(StanError::Data(format!("expected square [C,H,W] map, got {s:?}")));
    }
    if s[1] % 2 != 0 {
        return Err(StanError::Data(format!("cannot downsample odd side {}", s[1])));
    }
    if merge.input != 4 * s[0] {
        return Err(StanError::Data(format!("merge expects {} channels, map has {}", merge.input / 4, s[0])));
    }
    let tokens = map_to_tokens(ctx, x)?;
    let merged = merge_tokens(ctx, merge, tokens, s[1])?;
    tokens_to_map(ctx, merged, s[1] / 2, s[2] / 2)
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub stages: Vec<Vec<WindowBlock>>,
    /// Patch merging before stages 2, 3 and 4.
    pub merges: Vec<Linear>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    /// Spatial classifier C_S.
    pub classifier: Linear,
}

pub struct BackboneOutput {
    pub pyramid: FeaturePyramid,
    /// `[1, K]` logits of C_S.
    pub logits: Var,
    /// Attention weights of every block, stage by stage.
    pub attention: Vec<Var>,
}

impl Backbone {
    pub(crate) fn new(init: &mut Init<'_>, cfg: &BackboneConfig) -> Self {
        let c = cfg.stage_channels;
        let p = cfg.patch_size;
        let patch_weight = init.fan_in("backbone.patch_embed.weight".into(), vec![c[0], 3, p, p], 3 * p * p);
        let patch_bias = init.constant("backbone.patch_embed.bias".into(), vec![c[0]], 0.0);
        let mut stages = Vec::with_capacity(4);
        let mut merges = Vec::with_capacity(3);
        for s in 0..4 {
            if s > 0 {
                merges.push(Linear::new(init, &format!("backbone.merge{s}"), 4 * c[s - 1], c[s]));
            }
            let blocks = (0..cfg.stage_depths[s])
                .map(|b| {
                    WindowBlock::new(
                        init,
                        &format!("backbone.stage{}.block{b}", s + 1),
                        c[s],
                        cfg.num_heads[s],
                        cfg.mlp_ratio,
                    )
                })
                .collect();
            stages.push(blocks);
        }
        let norm_gamma = init.constant("backbone.norm.gamma".into(), vec![c[3]], 1.0);
        let norm_beta = init.constant("backbone.norm.beta".into(), vec![c[3]], 0.0);
        let classifier = Linear::new(init, "backbone.classifier", c[3], cfg.num_known_classes);
        Self {
            cfg: cfg.clone(),
            patch_weight,
            patch_bias,
            stages,
            merges,
            norm_gamma,
            norm_beta,
            classifier,
        }
    }

    /// Non-overlapping `p×p` patches linearly projected to `C_1` channels:
    /// `[3, H, W]` → `[C_1, H/p, W/p]`.
    pub fn patch_embed<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let size = self.cfg.image_size;
        if ctx.g.shape(image) != [3, size, size] {
            return Err(StanError::Data(format!(
                "image must be [3, {size}, {size}], got {:?}",
                ctx.g.shape(image)
            )));
        }
        let w = ctx.p(self.patch_weight)?;
        let b = ctx.p(self.patch_bias)?;
        let x = ctx.g.conv2d(image, w, self.cfg.patch_size, 0)?;
        Ok(ctx.g.add_channel_bias(x, b)?)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<BackboneOutput> {
        let sides = self.cfg.stage_sides();
        let embedded = self.patch_embed(ctx, image)?;
        let mut tokens = map_to_tokens(ctx, embedded)?;
        let mut maps = Vec::with_capacity(4);
        let mut attention = Vec::new();
        for s in 0..4 {
            if s > 0 {
                tokens = merge_tokens(ctx, &self.merges[s - 1], tokens, sides[s - 1])?;
            }
            let window = self.cfg.effective_window(s);
            for block in &self.stages[s] {
                let o = block.forward_tokens(ctx, tokens, sides[s], window)?;
                tokens = o.out;
                attention.push(o.attention);
            }
            maps.push(tokens_to_map(ctx, tokens, sides[s], sides[s])?);
        }
        let gamma = ctx.p(self.norm_gamma)?;
        let beta = ctx.p(self.norm_beta)?;
        let normed = ctx.g.layer_norm(tokens, gamma, beta, self.cfg.layer_norm_eps)?;
        let normed = tokens_to_map(ctx, normed, sides[3], sides[3])?;
        let pooled = ctx.g.global_avg_pool(normed)?;
        let pooled = ctx.g.reshape(pooled, vec![1, self.cfg.stage_channels[3]])?;
        let logits = self.classifier.forward(ctx, pooled)?;
        Ok(BackboneOutput {
            pyramid: FeaturePyramid {
                maps: [maps[0], maps[1], maps[2], maps[3]],
            },
            logits,
            attention,
        })
    }
}
