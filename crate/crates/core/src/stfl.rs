//! Spatial-temporal feature learning: an LSTM unrolled over the four
//! re-organized moments, whose forget block is the context-aware gate.

use stan_tensor::{Real, Var};

use crate::ca::CaGate;
use crate::config::MomentOrder;
use crate::params::{Ctx, Init, Linear};
use crate::sfso::ReorganizedSequence;
use crate::{Result, StanError};

/// Outer LSTM state, both `[1, d]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub cell: Var,
    pub hidden: Var,
}

#[derive(Debug, Clone)]
pub enum ForgetBlock {
    ContextAware(CaGate),
    /// `σ(W_f·z + b_f)` with `b_f` initialised to 1.
    Plain(Linear),
}

#[derive(Debug, Clone)]
pub struct Stfl {
    pub init_cell: Linear,
    pub init_hidden: Linear,
    pub input_gate: Linear,
    pub candidate: Linear,
    pub output_gate: Linear,
    pub forget: ForgetBlock,
    pub order: MomentOrder,
    pub input_width: usize,
    pub hidden: usize,
}

pub struct StflOutput {
    /// Hidden state after each step, in processing order.
    pub hiddens: Vec<Var>,
    /// Forget mask applied at each step.
    pub masks: Vec<Var>,
}

impl StflOutput {
    pub fn last(&self) -> Var {
        *self.hiddens.last().expect("four steps")
    }
}

impl Stfl {
    pub(crate) fn new(
        init: &mut Init<'_>,
        input_width: usize,
        hidden: usize,
        order: MomentOrder,
        forget: impl FnOnce(&mut Init<'_>) -> ForgetBlock,
    ) -> Self {
        let z = hidden + input_width;
        Self {
            init_cell: Linear::new(init, "stfl.init_cell", input_width, hidden),
            init_hidden: Linear::new(init, "stfl.init_hidden", input_width, hidden),
            input_gate: Linear::new(init, "stfl.input_gate", z, hidden),
            candidate: Linear::new(init, "stfl.candidate", z, hidden),
            output_gate: Linear::new(init, "stfl.output_gate", z, hidden),
            forget: forget(init),
            order,
            input_width,
            hidden,
        }
    }

    /// Instance-adaptive initial states from the pooled final-moment vector.
    pub fn init_states<T: Real>(&self, ctx: &mut Ctx<'_, T>, x_last: Var) -> Result<LstmState> {
        self.check_vec(ctx, x_last)?;
        let c = self.init_cell.forward(ctx, x_last)?;
        let cell = ctx.g.tanh(c)?;
        let h = self.init_hidden.forward(ctx, x_last)?;
        let hidden = ctx.g.tanh(h)?;
        Ok(LstmState { cell, hidden })
    }

    fn check_vec<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<()> {
        if ctx.g.shape(x) != [1, self.input_width] {
            return Err(StanError::Data(format!(
                "moment vector must be [1, {}], got {:?}",
                self.input_width,
                ctx.g.shape(x)
            )));
        }
        Ok(())
    }

    pub fn forget_mask<T: Real>(&self, ctx: &mut Ctx<'_, T>, h_prev: Var, x_vec: Var, x_map: Var) -> Result<Var> {
        match &self.forget {
            ForgetBlock::ContextAware(ca) => ca.forget_mask(ctx, h_prev, x_vec, x_map),
            ForgetBlock::Plain(lin) => {
                let z = ctx.g.concat(&[h_prev, x_vec], 1)?;
                let f = lin.forward(ctx, z)?;
                Ok(ctx.g.sigmoid(f)?)
            }
        }
    }

    /// One moment; returns the new state and the forget mask used.
    pub fn step<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        state: LstmState,
        x_vec: Var,
        x_map: Var,
    ) -> Result<(LstmState, Var)> {
        self.check_vec(ctx, x_vec)?;
        if ctx.g.shape(state.hidden) != [1, self.hidden] || ctx.g.shape(state.cell) != [1, self.hidden] {
            return Err(StanError::Data(format!("LSTM state must be [1, {}]", self.hidden)));
        }
        let z = ctx.g.concat(&[state.hidden, x_vec], 1)?;
        let i = self.input_gate.forward(ctx, z)?;
        let i = ctx.g.sigmoid(i)?;
        let g = self.candidate.forward(ctx, z)?;
        let g = ctx.g.tanh(g)?;
        let o = self.output_gate.forward(ctx, z)?;
        let o = ctx.g.sigmoid(o)?;
        let f = self.forget_mask(ctx, state.hidden, x_vec, x_map)?;
        let keep = ctx.g.mul(f, state.cell)?;
        let write = ctx.g.mul(i, g)?;
        let cell = ctx.g.add(keep, write)?;
        let t = ctx.g.tanh(cell)?;
        let hidden = ctx.g.mul(o, t)?;
        if !ctx.g.value(cell).is_finite() || !ctx.g.value(hidden).is_finite() {
            return Err(StanError::Numerical("non-finite LSTM state".into()));
        }
        Ok((LstmState { cell, hidden }, f))
    }

    /// Pools each moment, initialises from the final moment and unrolls.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, seq: &ReorganizedSequence) -> Result<StflOutput> {
        let steps: [usize; 4] = match self.order {
            MomentOrder::LowToHigh => [0, 1, 2, 3],
            MomentOrder::HighToLow => [3, 2, 1, 0],
        };
        let mut vecs = Vec::with_capacity(4);
        for &t in &steps {
            vecs.push(pooled_row(ctx, seq.maps[t])?);
        }
        let mut state = self.init_states(ctx, vecs[3])?;
        let mut out = StflOutput {
            hiddens: Vec::with_capacity(4),
            masks: Vec::with_capacity(4),
        };
        for (k, &t) in steps.iter().enumerate() {
            let (next, mask) = self.step(ctx, state, vecs[k], seq.maps[t])?;
            state = next;
            out.hiddens.push(state.hidden);
            out.masks.push(mask);
        }
        Ok(out)
    }
}

/// `[C, H, W]` → `[1, C]` by global average pooling.
pub fn pooled_row<T: Real>(ctx: &mut Ctx<'_, T>, map: Var) -> Result<Var> {
    let c = ctx.g.shape(map)[0];
    let v = ctx.g.global_avg_pool(map)?;
    Ok(ctx.g.reshape(v, vec![1, c])?)
}
