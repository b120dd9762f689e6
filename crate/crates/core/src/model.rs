//! Full network: backbone, SFSO, STFL with its forget gate, and the two
//! classifiers, assembled according to the configured variant.

use stan_tensor::{Real, Tensor, Var};

use crate::backbone::{Backbone, FeaturePyramid};
use crate::ca::CaGate;
use crate::config::{AggregationMode, ModelConfig, ModelVariant};
use crate::params::{Ctx, Init, Linear, ParamStore};
use crate::sfso::{ReorganizedSequence, Sfso};
use crate::stfl::{pooled_row, ForgetBlock, Stfl, StflOutput};
use crate::Result;

#[derive(Debug, Clone)]
pub struct StanModel {
    pub cfg: ModelConfig,
    pub variant: ModelVariant,
    pub backbone: Backbone,
    pub sfso: Option<Sfso>,
    pub stfl: Option<Stfl>,
    /// C_ST; absent for the backbone-only variant.
    pub head: Option<Linear>,
}

pub struct SampleOutput {
    pub pyramid: FeaturePyramid,
    /// `[1, K]` from C_S.
    pub logits_s: Var,
    /// `[1, K]` from C_ST.
    pub logits_st: Option<Var>,
    pub sequence: Option<ReorganizedSequence>,
    pub stfl: Option<StflOutput>,
    /// Input of C_ST, `[1, width]`.
    pub representation: Option<Var>,
    pub attention: Vec<Var>,
}

impl SampleOutput {
    /// Logits used for open-set scoring: C_ST when present, otherwise C_S.
    pub fn scoring_logits(&self) -> Var {
        self.logits_st.unwrap_or(self.logits_s)
    }
}

pub struct BatchOutput {
    /// `[N, K]`.
    pub logits_s: Var,
    pub logits_st: Option<Var>,
}

impl BatchOutput {
    pub fn scoring_logits(&self) -> Var {
        self.logits_st.unwrap_or(self.logits_s)
    }
}

impl StanModel {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let variant = cfg.variant()?;
        let dims = cfg.dims();
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let backbone = Backbone::new(&mut init, &cfg.backbone);
        let sfso = variant
            .has_sfso()
            .then(|| Sfso::new(&mut init, &cfg.backbone, &dims, cfg.sfso.kernel));
        let stfl = variant.has_stfl().then(|| {
            let d_in = dims.common_channels;
            let d = dims.hidden;
            Stfl::new(&mut init, d_in, d, cfg.stfl.moment_order, |init| {
                if variant.has_ca() {
                    ForgetBlock::ContextAware(CaGate::new(
                        init,
                        dims.common_channels,
                        d,
                        d_in,
                        dims.ca_hidden,
                        cfg.ca.scan_order,
                        cfg.ca.initial_state_std,
                        cfg.ca.freeze_initial_states,
                    ))
                } else {
                    ForgetBlock::Plain(Linear::with_bias(init, "stfl.forget_gate", d + d_in, d, 1.0))
                }
            })
        });
        let k = cfg.backbone.num_known_classes;
        let width = match variant {
            ModelVariant::BackboneOnly => None,
            ModelVariant::Module1Agg => Some(cfg.backbone.stage_channels.iter().sum()),
            ModelVariant::Module2Agg => Some(4 * dims.common_channels),
            ModelVariant::Module3Agg { .. } => Some(4 * dims.hidden),
            ModelVariant::Stan { .. } => Some(dims.hidden),
        };
        let head = width.map(|w| Linear::new(&mut init, "head.classifier", w, k));
        let model = Self {
            cfg: cfg.clone(),
            variant,
            backbone,
            sfso,
            stfl,
            head,
        };
        Ok((model, store))
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.backbone.num_known_classes
    }

    /// Width of the C_ST input, if the variant has one.
    pub fn representation_width(&self) -> Option<usize> {
        self.head.map(|h| h.input)
    }

    pub fn forward_sample<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<SampleOutput> {
        let bb = self.backbone.forward(ctx, image)?;
        let mut out = SampleOutput {
            pyramid: bb.pyramid,
            logits_s: bb.logits,
            logits_st: None,
            sequence: None,
            stfl: None,
            representation: None,
            attention: bb.attention,
        };
        if let Some(sfso) = &self.sfso {
            out.sequence = Some(sfso.forward(ctx, &bb.pyramid)?);
        }
        if let (Some(stfl), Some(seq)) = (&self.stfl, &out.sequence) {
            out.stfl = Some(stfl.forward(ctx, seq)?);
        }
        let representation = match self.variant {
            ModelVariant::BackboneOnly => None,
            ModelVariant::Module1Agg => Some(concat_pooled(ctx, &bb.pyramid.maps)?),
            ModelVariant::Module2Agg => {
                let seq = out.sequence.expect("sfso present");
                Some(concat_pooled(ctx, &seq.maps)?)
            }
            ModelVariant::Module3Agg { .. } => {
                let hs = &out.stfl.as_ref().expect("stfl present").hiddens;
                Some(ctx.g.concat(hs, 1)?)
            }
            ModelVariant::Stan { .. } => Some(out.stfl.as_ref().expect("stfl present").last()),
        };
        if let (Some(head), Some(r)) = (&self.head, representation) {
            out.logits_st = Some(head.forward(ctx, r)?);
        }
        out.representation = representation;
        Ok(out)
    }

    /// Runs every image on one tape and stacks the logits row-wise.
    pub fn forward_batch<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: &[&Tensor<f32>]) -> Result<BatchOutput> {
        let mut ls = Vec::with_capacity(images.len());
        let mut lst = Vec::with_capacity(images.len());
        for img in images {
            let x = ctx.input(img)?;
            let o = self.forward_sample(ctx, x)?;
            ls.push(o.logits_s);
            lst.extend(o.logits_st);
        }
        let logits_s = ctx.g.concat(&ls, 0)?;
        let logits_st = if lst.is_empty() { None } else { Some(ctx.g.concat(&lst, 0)?) };
        Ok(BatchOutput { logits_s, logits_st })
    }

    /// Scoring logits of one image, without recording gradients.
    pub fn infer(&self, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut ctx = Ctx::new(store, false);
        let x = ctx.input(image)?;
        let o = self.forward_sample(&mut ctx, x)?;
        Ok(ctx.g.value(o.scoring_logits()).data().to_vec())
    }

    pub fn aggregation_mode(&self) -> AggregationMode {
        self.cfg.stfl.aggregation_mode
    }
}

fn concat_pooled<T: Real>(ctx: &mut Ctx<'_, T>, maps: &[Var]) -> Result<Var> {
    let pooled = maps.iter().map(|&m| pooled_row(ctx, m)).collect::<Result<Vec<_>>>()?;
    Ok(ctx.g.concat(&pooled, 1)?)
}
