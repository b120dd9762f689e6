//! Per-block activation maps: channel-mean absolute activation, min-max
//! normalised and upsampled to the image size by nearest neighbour.

use std::path::Path;

use stan_tensor::Tensor;

use crate::io::{tensor_file, write_atomic};
use crate::model::StanModel;
use crate::params::{Ctx, ParamStore};
use crate::{Result, StanError};

/// Channel-mean of `|x|` for a `[C, H, W]` map, as `[H, W]`.
pub fn channel_mean_abs(map: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(StanError::Data(format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = map.data();
    Ok(Tensor::from_fn(vec![h, w], |i| {
        (0..c).map(|ch| d[ch * h * w + i].abs()).sum::<f32>() / c as f32
    })?)
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(t: &Tensor<f32>) -> Tensor<f32> {
    let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    t.map(|v| if range > 0.0 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.0 })
}

/// Nearest-neighbour upsampling of `[h, w]` to `[size, size]`.
pub fn upsample_nearest(t: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Ok(Tensor::from_fn(vec![size, size], |i| {
        let (y, x) = (i / size, i % size);
        t.data()[(y * h / size) * w + x * w / size]
    })?)
}

/// One `[image_size, image_size]` map per backbone stage.
pub fn attention_maps(model: &StanModel, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let mut ctx = Ctx::new(store, false);
    let x = ctx.input(image)?;
    let bb = model.backbone.forward(&mut ctx, x)?;
    let size = model.cfg.backbone.image_size;
    bb.pyramid
        .maps
        .iter()
        .map(|&m| {
            let stat = channel_mean_abs(ctx.g.value(m))?;
            upsample_nearest(&min_max_normalize(&stat), size)
        })
        .collect()
}

/// Binary greyscale PGM (`P5`, maxval 255) of a `[h, w]` map in `[0, 1]`.
pub fn encode_pgm(t: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Writes `block{i}.pgm` and `block{i}.stan` for i = 1..4.
pub fn write_maps(dir: &Path, maps: &[Tensor<f32>]) -> Result<()> {
    for (i, m) in maps.iter().enumerate() {
        write_atomic(&dir.join(format!("block{}.pgm", i + 1)), &encode_pgm(m))?;
        tensor_file::write_tensor(&dir.join(format!("block{}.stan", i + 1)), m)?;
    }
    Ok(())
}
