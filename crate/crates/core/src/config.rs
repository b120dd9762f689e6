//! Run configuration: model architecture, loss, optimizers, data and
//! evaluation settings. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::synthetic::SyntheticSpec;
use crate::{Result, StanError};

fn config_err(msg: impl Into<String>) -> StanError {
    StanError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub window_size: usize,
    pub num_heads: [usize; 4],
    pub num_known_classes: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
    /// Reserved; shifted windows are not implemented.
    pub shifted_windows: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            stage_channels: [16, 32, 64, 128],
            stage_depths: [1, 1, 2, 1],
            window_size: 2,
            num_heads: [1, 2, 4, 4],
            num_known_classes: 4,
            mlp_ratio: 4,
            layer_norm_eps: 1e-5,
            shifted_windows: false,
        }
    }
}

impl BackboneConfig {
    /// Token-grid side of each stage.
    pub fn stage_sides(&self) -> [usize; 4] {
        let g = self.image_size / self.patch_size.max(1);
        [g, g / 2, g / 4, g / 8]
    }

    /// Attention window side actually used at a stage: the configured window,
    /// clamped to the grid once the grid is smaller.
    pub fn effective_window(&self, stage: usize) -> usize {
        self.window_size.min(self.stage_sides()[stage])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shifted_windows {
            return Err(config_err("backbone.shifted_windows is reserved and not implemented"));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(config_err(format!(
                "backbone.image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if (self.image_size / self.patch_size) % 8 != 0 {
            return Err(config_err(format!(
                "backbone.image_size {} must be divisible by patch_size*8 = {}",
                self.image_size,
                self.patch_size * 8
            )));
        }
        if self.stage_channels[0] == 0 {
            return Err(config_err("backbone.stage_channels must be positive"));
        }
        for i in 1..4 {
            if self.stage_channels[i] != 2 * self.stage_channels[i - 1] {
                return Err(config_err(format!(
                    "backbone.stage_channels must double per stage, got {:?}",
                    self.stage_channels
                )));
            }
        }
        for i in 0..4 {
            let (c, h) = (self.stage_channels[i], self.num_heads[i]);
            if h == 0 || c % h != 0 {
                return Err(config_err(format!("backbone.num_heads[{i}]={h} must divide channels {c}")));
            }
            if self.stage_depths[i] == 0 {
                return Err(config_err(format!("backbone.stage_depths[{i}] must be at least 1")));
            }
            let side = self.stage_sides()[i];
            if self.window_size == 0 || (side > self.window_size && side % self.window_size != 0) {
                return Err(config_err(format!(
                    "backbone.window_size {} must divide stage {} grid side {side}",
                    self.window_size,
                    i + 1
                )));
            }
        }
        if self.num_known_classes < 2 {
            return Err(config_err("backbone.num_known_classes must be at least 2"));
        }
        if self.mlp_ratio == 0 {
            return Err(config_err("backbone.mlp_ratio must be positive"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(config_err("backbone.layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfsoConfig {
    pub enabled: bool,
    /// Defaults to the channel count of the third pyramid level.
    pub common_channels: Option<usize>,
    /// Defaults to the spatial side of the fourth pyramid level.
    pub common_side: Option<usize>,
    /// Odd projection kernel size, applied with "same" padding.
    pub kernel: usize,
}

impl Default for SfsoConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            common_channels: None,
            common_side: None,
            kernel: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Module1Agg,
    Module2Agg,
    Module3Agg,
    Stan,
}

impl AggregationMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Module1Agg => "module1_agg",
            Self::Module2Agg => "module2_agg",
            Self::Module3Agg => "module3_agg",
            Self::Stan => "stan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentOrder {
    /// Block 1 first (left to right in the STFL unroll).
    LowToHigh,
    HighToLow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StflConfig {
    pub enabled: bool,
    /// Defaults to the SFSO common channel count.
    pub hidden_size: Option<usize>,
    pub aggregation_mode: AggregationMode,
    pub moment_order: MomentOrder,
}

impl Default for StflConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden_size: None,
            aggregation_mode: AggregationMode::Stan,
            moment_order: MomentOrder::LowToHigh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    RowMajor,
    ColumnMajor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaConfig {
    pub enabled: bool,
    /// Defaults to the STFL hidden size.
    pub hidden_size: Option<usize>,
    pub scan_order: ScanOrder,
    /// Keep the randomly drawn initial inner states fixed during training.
    pub freeze_initial_states: bool,
    /// Standard deviation of the initial inner states.
    pub initial_state_std: f64,
}

impl Default for CaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden_size: None,
            scan_order: ScanOrder::RowMajor,
            freeze_initial_states: false,
            initial_state_std: 0.1,
        }
    }
}

/// Architecture-only part of a run configuration; this is what a checkpoint
/// is tied to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub sfso: SfsoConfig,
    pub stfl: StflConfig,
    pub ca: CaConfig,
}

/// Which modules a configuration actually builds, and how the classified
/// representation is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Backbone and its classifier only; open-set scores come from C_S.
    BackboneOnly,
    Module1Agg,
    Module2Agg,
    Module3Agg { ca: bool },
    Stan { ca: bool },
}

impl ModelVariant {
    pub fn has_sfso(self) -> bool {
        !matches!(self, Self::BackboneOnly | Self::Module1Agg)
    }

    pub fn has_stfl(self) -> bool {
        matches!(self, Self::Module3Agg { .. } | Self::Stan { .. })
    }

    pub fn has_ca(self) -> bool {
        matches!(self, Self::Module3Agg { ca: true } | Self::Stan { ca: true })
    }
}

/// Resolved SFSO/STFL/CA sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedDims {
    pub common_channels: usize,
    pub common_side: usize,
    pub hidden: usize,
    pub ca_hidden: usize,
}

impl ModelConfig {
    pub fn variant(&self) -> Result<ModelVariant> {
        let (sfso, stfl, ca) = (self.sfso.enabled, self.stfl.enabled, self.ca.enabled);
        if stfl && !sfso {
            return Err(config_err("stfl.enabled requires sfso.enabled"));
        }
        if ca && !stfl && sfso {
            return Err(config_err("ca.enabled requires stfl.enabled"));
        }
        Ok(match self.stfl.aggregation_mode {
            AggregationMode::Module1Agg => ModelVariant::Module1Agg,
            AggregationMode::Module2Agg => {
                if !sfso {
                    return Err(config_err("aggregation_mode module2_agg requires sfso.enabled"));
                }
                ModelVariant::Module2Agg
            }
            mode => match (sfso, stfl) {
                (false, _) => {
                    if ca {
                        return Err(config_err("ca.enabled requires stfl.enabled"));
                    }
                    ModelVariant::BackboneOnly
                }
                (true, false) => ModelVariant::Module2Agg,
                (true, true) if mode == AggregationMode::Module3Agg => ModelVariant::Module3Agg { ca },
                (true, true) => ModelVariant::Stan { ca },
            },
        })
    }

    pub fn dims(&self) -> ResolvedDims {
        let b = &self.backbone;
        let common_channels = self.sfso.common_channels.unwrap_or(b.stage_channels[2]);
        let common_side = self.sfso.common_side.unwrap_or(b.stage_sides()[3]);
        let hidden = self.stfl.hidden_size.unwrap_or(common_channels);
        let ca_hidden = self.ca.hidden_size.unwrap_or(hidden);
        ResolvedDims {
            common_channels,
            common_side,
            hidden,
            ca_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let variant = self.variant()?;
        let d = self.dims();
        if variant.has_sfso() {
            if d.common_channels == 0 || d.common_side == 0 {
                return Err(config_err("sfso common size must be positive"));
            }
            if self.sfso.kernel == 0 || self.sfso.kernel % 2 == 0 {
                return Err(config_err(format!("sfso.kernel must be odd, got {}", self.sfso.kernel)));
            }
            for (i, &side) in self.backbone.stage_sides().iter().enumerate() {
                if side < d.common_side {
                    return Err(config_err(format!(
                        "pyramid level {} has side {side}, smaller than sfso.common_side {}",
                        i + 1,
                        d.common_side
                    )));
                }
                if side % d.common_side != 0 {
                    return Err(config_err(format!(
                        "pyramid level {} side {side} is not a multiple of sfso.common_side {}",
                        i + 1,
                        d.common_side
                    )));
                }
            }
        }
        if variant.has_stfl() && d.hidden == 0 {
            return Err(config_err("stfl.hidden_size must be positive"));
        }
        if variant.has_ca() {
            if d.ca_hidden == 0 {
                return Err(config_err("ca.hidden_size must be positive"));
            }
            if !(self.ca.initial_state_std >= 0.0) {
                return Err(config_err("ca.initial_state_std must be non-negative"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Small configuration for finite-difference sweeps: 16×16 images,
    /// patch 1, channels [2,4,8,16], one block per stage, SFSO side 2.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                image_size: 16,
                patch_size: 1,
                stage_channels: [2, 4, 8, 16],
                stage_depths: [1, 1, 1, 1],
                window_size: 2,
                num_heads: [1, 1, 2, 2],
                num_known_classes: 3,
                mlp_ratio: 2,
                ..BackboneConfig::default()
            },
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone (including C_S).
    pub backbone: AdamWConfig,
    /// SFSO, STFL, CA and C_ST.
    pub rest: SgdConfig,
    pub schedule: LrSchedule,
    /// Stop once the scoring classifier reaches this training accuracy,
    /// checked after every epoch.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            backbone: AdamWConfig::default(),
            rest: SgdConfig::default(),
            schedule: LrSchedule::Constant,
            stop_at_train_acc: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("optimizer.batch_size must be at least 1"));
        }
        let b = &self.backbone;
        let r = &self.rest;
        let nonneg = [
            ("optimizer.backbone.lr", b.lr),
            ("optimizer.backbone.weight_decay", b.weight_decay),
            ("optimizer.rest.lr", r.lr),
            ("optimizer.rest.weight_decay", r.weight_decay),
            ("optimizer.rest.momentum", r.momentum),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&b.beta1) || !(0.0..1.0).contains(&b.beta2) || !(b.eps > 0.0) {
            return Err(config_err("optimizer.backbone betas must lie in [0,1) and eps be positive"));
        }
        if r.momentum >= 1.0 {
            return Err(config_err("optimizer.rest.momentum must be below 1"));
        }
        if let Some(a) = self.stop_at_train_acc {
            if !(a > 0.0 && a <= 1.0) {
                return Err(config_err(format!("optimizer.stop_at_train_acc must lie in (0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub target_tpr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { target_tpr: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub sfso: SfsoConfig,
    pub stfl: StflConfig,
    pub ca: CaConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            sfso: self.sfso.clone(),
            stfl: self.stfl.clone(),
            ca: self.ca.clone(),
        }
    }

    pub fn set_model(&mut self, model: ModelConfig) {
        self.backbone = model.backbone;
        self.sfso = model.sfso;
        self.stfl = model.stfl;
        self.ca = model.ca;
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StanError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            StanError::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if !(self.loss.lambda.is_finite() && self.loss.lambda >= 0.0) {
            return Err(config_err(format!("loss.lambda must be finite and non-negative, got {}", self.loss.lambda)));
        }
        self.optimizer.validate()?;
        if !(self.eval.target_tpr > 0.0 && self.eval.target_tpr <= 1.0) {
            return Err(config_err(format!("eval.target_tpr must lie in (0,1], got {}", self.eval.target_tpr)));
        }
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(config_err("data: set either manifest or synthetic, not both")),
            (None, Some(spec)) => spec.validate()?,
            _ => {}
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
