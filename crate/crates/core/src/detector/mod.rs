//! Toy two-branch detector: per-modality backbones, a linear fusion of
//! their pyramids, and one head architecture shared by the fusion head
//! and the two auxiliary heads.

mod checkpoint;
mod layers;
mod loss;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_VERSION};
pub use layers::{
    backbone_forward, fuse, head_forward, init_param, BackboneParams, ConvParams, FeaturePyramid,
    FusionParams, Init, HeadLevelOutput, HeadOutput, HeadParams,
};
pub use loss::{
    assign_targets, detection_loss, rsc_total_loss, Annotation, LevelTargets, LossParts, Targets,
};
pub use model::{Batch, Branch, Detector, ForwardOutputs, ModelKind};

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
}

/// Per-branch feature extractor layout.
///
/// The stem is a run of stride-2 convolutions that only downsample; each
/// entry of `stage_widths` is one further stride-2 stage, and the last
/// three stages form the pyramid (stride 8/16/32 with the default
/// two-layer stem).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_widths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub probe_stage_index: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            stem_widths: vec![4, 8],
            stage_widths: vec![8, 16, 32],
            probe_stage_index: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.input_channels == 0 {
            return Err(DetectorError::Config("input_channels must be positive".into()));
        }
        if self.stage_widths.len() < 3 {
            return Err(DetectorError::Config(format!(
                "need at least 3 stages for a three-level pyramid, got {}",
                self.stage_widths.len()
            )));
        }
        if self.stage_widths.iter().chain(&self.stem_widths).any(|&w| w == 0) {
            return Err(DetectorError::Config("channel widths must be positive".into()));
        }
        if self.probe_stage_index + 1 != self.stage_widths.len() {
            return Err(DetectorError::Config(format!(
                "probe_stage_index {} must name the final stage ({})",
                self.probe_stage_index,
                self.stage_widths.len() - 1
            )));
        }
        Ok(())
    }

    /// Number of stride-2 layers between the image and the last stage.
    pub fn downsamplings(&self) -> usize {
        self.stem_widths.len() + self.stage_widths.len()
    }

    /// Channel widths of the three pyramid levels.
    pub fn pyramid_widths(&self) -> [usize; 3] {
        let n = self.stage_widths.len();
        [
            self.stage_widths[n - 3],
            self.stage_widths[n - 2],
            self.stage_widths[n - 1],
        ]
    }

    /// Pixel strides of the three pyramid levels.
    pub fn pyramid_strides(&self) -> [usize; 3] {
        let d = self.downsamplings();
        [1 << (d - 2), 1 << (d - 1), 1 << d]
    }

    /// Checks that a square image of side `size` downsamples cleanly.
    pub fn check_input(&self, height: usize, width: usize) -> Result<(), DetectorError> {
        let m = 1usize << self.downsamplings();
        if height % m != 0 || width % m != 0 {
            return Err(DetectorError::Config(format!(
                "input {height}x{width} is not divisible by 2^{} = {m}",
                self.downsamplings()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    /// Initialization range multiplier: parameters start uniform in
    /// `±init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 3,
            init_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(DetectorError::Config("num_classes must be positive".into()));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(DetectorError::Config("init_gain must be positive".into()));
        }
        Ok(())
    }
}

/// Coefficients of the per-head detection loss and of the three-head
/// total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_cls: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_box: 1.0,
            lambda_cls: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    /// Name of the first offending field, if any.
    pub fn invalid_field(&self) -> Option<(&'static str, String)> {
        for (name, v) in [
            ("lambda_box", self.lambda_box),
            ("lambda_cls", self.lambda_cls),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Some((name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_box == 0.0 && self.lambda_cls == 0.0 {
            return Some(("lambda_cls", "lambda_box and lambda_cls are both zero".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Some(("alpha", "alpha, beta and gamma are all zero".into()));
        }
        None
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        match self.invalid_field() {
            Some((name, msg)) => Err(DetectorError::Config(format!("{name}: {msg}"))),
            None => Ok(()),
        }
    }

    /// The naive-addition objective: fusion loss only.
    pub fn baseline(self) -> Self {
        Self {
            beta: 0.0,
            gamma: 0.0,
            ..self
        }
    }
}
