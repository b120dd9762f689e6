//! Context-aware forget gate: an inner LSTM scans the pixels of the current
//! moment's map and its final output, joined with the pooled moment vector,
//! becomes a sigmoid mask over the outer memory cell.

use stan_tensor::{Real, Tensor, Var};

use crate::config::ScanOrder;
use crate::params::{Ctx, Init, Linear, ParamId};
use crate::{Result, StanError};

/// Spatial positions `(row, col)` of an `h×w` map in scan order.
pub fn scan_positions(h: usize, w: usize, order: ScanOrder) -> Vec<(usize, usize)> {
    match order {
        ScanOrder::RowMajor => (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect(),
        ScanOrder::ColumnMajor => (0..w).flat_map(|x| (0..h).map(move |y| (y, x))).collect(),
    }
}

/// Splits a `[D, H, W]` map into its `H·W` pixel vectors of length `D`.
pub fn pixel_split<T: Real>(map: &Tensor<T>, order: ScanOrder) -> Result<Vec<Tensor<T>>> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(StanError::Data(format!("pixel_split expects [D,H,W], got {s:?}")));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    scan_positions(h, w, order)
        .into_iter()
        .map(|(y, x)| {
            let v = (0..d).map(|c| map.data()[(c * h + y) * w + x]).collect();
            Ok(Tensor::new(vec![d], v)?)
        })
        .collect()
}

/// Inverse of [`pixel_split`].
pub fn pixel_merge<T: Real>(pixels: &[Tensor<T>], h: usize, w: usize, order: ScanOrder) -> Result<Tensor<T>> {
    if pixels.len() != h * w || pixels.is_empty() {
        return Err(StanError::Data(format!("{} pixels cannot fill a {h}x{w} map", pixels.len())));
    }
    let d = pixels[0].numel();
    let mut data = vec![T::zero(); d * h * w];
    for (p, (y, x)) in pixels.iter().zip(scan_positions(h, w, order)) {
        if p.numel() != d {
            return Err(StanError::Data("pixel vectors differ in length".into()));
        }
        for c in 0..d {
            data[(c * h + y) * w + x] = p.data()[c];
        }
    }
    Ok(Tensor::new(vec![d, h, w], data)?)
}

/// Conventional LSTM gates over `z = concat(hidden, input)`.
#[derive(Debug, Clone, Copy)]
pub struct LstmGates {
    pub input: Linear,
    pub forget: Linear,
    pub candidate: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct CaGate {
    pub gates: LstmGates,
    pub initial_cell: ParamId,
    pub initial_hidden: ParamId,
    /// Final FC producing the mask logits.
    pub mask: Linear,
    pub order: ScanOrder,
    pub pixel_channels: usize,
    pub outer_hidden: usize,
    pub hidden: usize,
}

impl CaGate {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        init: &mut Init<'_>,
        pixel_channels: usize,
        outer_hidden: usize,
        vec_width: usize,
        hidden: usize,
        order: ScanOrder,
        std: f64,
        freeze: bool,
    ) -> Self {
        let z = hidden + pixel_channels + outer_hidden;
        let gates = LstmGates {
            input: Linear::new(init, "ca.lstm.input", z, hidden),
            forget: Linear::new(init, "ca.lstm.forget", z, hidden),
            candidate: Linear::new(init, "ca.lstm.candidate", z, hidden),
            output: Linear::new(init, "ca.lstm.output", z, hidden),
        };
        let initial_cell = init.normal("ca.initial_cell".into(), vec![1, hidden], std, !freeze);
        let initial_hidden = init.normal("ca.initial_hidden".into(), vec![1, hidden], std, !freeze);
        let mask = Linear::with_bias(init, "ca.mask", hidden + vec_width, outer_hidden, 1.0);
        Self {
            gates,
            initial_cell,
            initial_hidden,
            mask,
            order,
            pixel_channels,
            outer_hidden,
            hidden,
        }
    }

    /// `[D, H, W]` map → `[H·W, D]` pixel rows in scan order.
    pub fn pixels<T: Real>(&self, ctx: &mut Ctx<'_, T>, map: Var) -> Result<Var> {
        let s = ctx.g.shape(map).to_vec();
        if s.len() != 3 || s[0] != self.pixel_channels {
            return Err(StanError::Data(format!(
                "context map must be [{}, H, W], got {s:?}",
                self.pixel_channels
            )));
        }
        let (d, h, w) = (s[0], s[1], s[2]);
        let idx: Vec<usize> = scan_positions(h, w, self.order)
            .into_iter()
            .flat_map(|(y, x)| (0..d).map(move |c| (c * h + y) * w + x))
            .collect();
        Ok(ctx.g.gather(map, idx, vec![h * w, d])?)
    }

    /// Mask `[1, d]` with every element in (0, 1).
    pub fn forget_mask<T: Real>(&self, ctx: &mut Ctx<'_, T>, h_prev: Var, x_vec: Var, x_map: Var) -> Result<Var> {
        if ctx.g.shape(h_prev) != [1, self.outer_hidden] {
            return Err(StanError::Data(format!(
                "outer hidden state must be [1, {}], got {:?}",
                self.outer_hidden,
                ctx.g.shape(h_prev)
            )));
        }
        if ctx.g.shape(x_vec) != [1, self.mask.input - self.hidden] {
            return Err(StanError::Data(format!(
                "moment vector must be [1, {}], got {:?}",
                self.mask.input - self.hidden,
                ctx.g.shape(x_vec)
            )));
        }
        let pixels = self.pixels(ctx, x_map)?;
        let n = ctx.g.shape(pixels)[0];
        let mut c = ctx.p(self.initial_cell)?;
        let mut h = ctx.p(self.initial_hidden)?;
        for j in 0..n {
            let pixel = ctx.g.rows(pixels, j, 1)?;
            let z = ctx.g.concat(&[h, pixel, h_prev], 1)?;
            (c, h) = lstm_cell(ctx, &self.gates, z, c)?;
        }
        let joined = ctx.g.concat(&[h, x_vec], 1)?;
        let logits = self.mask.forward(ctx, joined)?;
        Ok(ctx.g.sigmoid(logits)?)
    }
}

/// One conventional LSTM update; returns `(cell, hidden)`.
pub(crate) fn lstm_cell<T: Real>(ctx: &mut Ctx<'_, T>, gates: &LstmGates, z: Var, cell: Var) -> Result<(Var, Var)> {
    let i = gates.input.forward(ctx, z)?;
    let i = ctx.g.sigmoid(i)?;
    let f = gates.forget.forward(ctx, z)?;
    let f = ctx.g.sigmoid(f)?;
    let g = gates.candidate.forward(ctx, z)?;
    let g = ctx.g.tanh(g)?;
    let o = gates.output.forward(ctx, z)?;
    let o = ctx.g.sigmoid(o)?;
    let keep = ctx.g.mul(f, cell)?;
    let write = ctx.g.mul(i, g)?;
    let cell = ctx.g.add(keep, write)?;
    let t = ctx.g.tanh(cell)?;
    let hidden = ctx.g.mul(o, t)?;
    Ok((cell, hidden))
}
