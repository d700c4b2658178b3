use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::decoupler::{route_forward, RoutePlan, RoutedViews};
use crate::detector::{
    backbone_forward, detection_loss, fuse, head_forward, rsc_total_loss, Annotation,
    BackboneParams, DetectorError, FeaturePyramid, FusionParams, HeadOutput, HeadParams,
    Init, LossParts, LossWeights, ModelConfig, Targets,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    M1,
    M2,
}

impl Branch {
    pub fn index(self) -> usize {
        match self {
            Branch::M1 => 0,
            Branch::M2 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::M1 => "m1",
            Branch::M2 => "m2",
        }
    }

    pub const BOTH: [Branch; 2] = [Branch::M1, Branch::M2];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type", content = "branch")]
pub enum ModelKind {
    /// Two backbones, fusion layer, fusion head and two auxiliary heads.
    #[default]
    Multimodal,
    /// One backbone with one head; parameter names match the multimodal
    /// model's backbone and auxiliary head for that branch.
    Unimodal(Branch),
}

/// A mini-batch of paired images with dense targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    /// `[N, C, H, W]` per modality.
    pub images: [Tensor<S>; 2],
    pub targets: Targets<S>,
    pub annotations: Vec<Annotation>,
}

/// Every intermediate the trainer and the tests inspect.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<S> {
    pub images: [Option<Var>; 2],
    pub pyramids: [Option<FeaturePyramid>; 2],
    pub views: Option<RoutedViews>,
    pub fused: Option<FeaturePyramid>,
    /// Indexed like the router outputs: aux1, aux2, fusion.
    pub heads: [Option<HeadOutput>; 3],
    pub losses: [Option<LossParts<S>>; 3],
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector<S> {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub seed: u64,
    pub params: ParamStore<S>,
    pub backbones: [Option<BackboneParams>; 2],
    pub fusion: Option<FusionParams>,
    /// aux1, aux2, fusion.
    pub heads: [Option<HeadParams>; 3],
}

pub(crate) const HEAD_NAMES: [&str; 3] = ["head.aux1", "head.aux2", "head.fusion"];

impl<S: Scalar> Detector<S> {
    pub fn new(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let init = Init {
            seed,
            gain: config.init_gain,
        };
        let widths = config.backbone.pyramid_widths();
        let mut backbones = [None, None];
        let mut heads = [None, None, None];
        let mut fusion = None;
        let branches: Vec<Branch> = match kind {
            ModelKind::Multimodal => Branch::BOTH.to_vec(),
            ModelKind::Unimodal(b) => vec![b],
        };
        for b in &branches {
            let i = b.index();
            backbones[i] = Some(BackboneParams::register(
                &mut params,
                init,
                &format!("backbone{}", i + 1),
                &config.backbone,
            )?);
        }
        if kind == ModelKind::Multimodal {
            fusion = Some(FusionParams::register(&mut params, init, "fusion", widths)?);
        }
        for b in &branches {
            let i = b.index();
            heads[i] = Some(HeadParams::register(
                &mut params,
                init,
                HEAD_NAMES[i],
                widths,
                config.num_classes,
            )?);
        }
        if kind == ModelKind::Multimodal {
            heads[2] = Some(HeadParams::register(
                &mut params,
                init,
                HEAD_NAMES[2],
                widths,
                config.num_classes,
            )?);
        }
        Ok(Self {
            config,
            kind,
            seed,
            params,
            backbones,
            fusion,
            heads,
        })
    }

    pub fn backbone(&self, branch: Branch) -> Result<&BackboneParams, DetectorError> {
        self.backbones[branch.index()].as_ref().ok_or_else(|| {
            DetectorError::Config(format!("model has no {} backbone", branch.name()))
        })
    }

    pub fn probe_ids(&self, branch: Branch) -> Result<Vec<ParamId>, DetectorError> {
        Ok(self.backbone(branch)?.probe_ids().to_vec())
    }

    pub fn backbone_ids(&self, branch: Branch) -> Result<Vec<ParamId>, DetectorError> {
        Ok(self.backbone(branch)?.all_ids())
    }

    /// Head used for predictions: the fusion head, or the single head of
    /// a unimodal model.
    pub fn inference_head(&self) -> usize {
        match self.kind {
            ModelKind::Multimodal => 2,
            ModelKind::Unimodal(b) => b.index(),
        }
    }

    /// Runs the backbone of `branch` on an image batch, on a fresh tape.
    pub fn extract_features(
        &self,
        branch: Branch,
        image: &Tensor<S>,
    ) -> Result<Vec<Tensor<S>>, DetectorError> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let bp = self.backbone(branch)?;
        let pyr = backbone_forward(&mut tape, &self.params, bp, &self.config.backbone, x)?;
        Ok(pyr.levels.iter().map(|&v| tape.value(v).clone()).collect())
    }

    fn pyramids(
        &self,
        tape: &mut Tape<S>,
        images: &[Tensor<S>; 2],
    ) -> Result<([Option<Var>; 2], [Option<FeaturePyramid>; 2]), DetectorError> {
        let mut vars = [None, None];
        let mut pyramids = [None, None];
        for b in Branch::BOTH {
            let i = b.index();
            if let Some(bp) = &self.backbones[i] {
                let x = tape.constant(images[i].clone());
                vars[i] = Some(x);
                pyramids[i] = Some(backbone_forward(
                    tape,
                    &self.params,
                    bp,
                    &self.config.backbone,
                    x,
                )?);
            }
        }
        Ok((vars, pyramids))
    }

    /// Records the full training graph for one batch.
    ///
    /// For a multimodal model the pyramids pass through the router built
    /// from `plan`; auxiliary heads are evaluated only when their loss
    /// weight is positive. A unimodal model ignores `plan` and the
    /// alpha/beta/gamma weights; its total is its single head loss.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        batch: &Batch<S>,
        plan: &RoutePlan,
        weights: &LossWeights,
    ) -> Result<ForwardOutputs<S>, DetectorError> {
        let (images, pyramids) = self.pyramids(tape, &batch.images)?;
        let mut heads: [Option<HeadOutput>; 3] = [None, None, None];
        let mut losses: [Option<LossParts<S>>; 3] = [None, None, None];
        match self.kind {
            ModelKind::Unimodal(b) => {
                let i = b.index();
                let pyr = pyramids[i].as_ref().expect("unimodal backbone");
                let hp = self.heads[i].as_ref().expect("unimodal head");
                let out = head_forward(tape, &self.params, hp, pyr)?;
                let parts = detection_loss(tape, &out, &batch.targets, weights)?;
                let total = parts.total;
                heads[i] = Some(out);
                losses[i] = Some(parts);
                Ok(ForwardOutputs {
                    images,
                    pyramids,
                    views: None,
                    fused: None,
                    heads,
                    losses,
                    total,
                })
            }
            ModelKind::Multimodal => {
                let (f1, f2) = (
                    pyramids[0].as_ref().expect("backbone1"),
                    pyramids[1].as_ref().expect("backbone2"),
                );
                let views = route_forward(tape, f1, f2, plan);
                let aux_weights = [weights.beta, weights.gamma];
                for (i, view) in [&views.aux1, &views.aux2].into_iter().enumerate() {
                    if aux_weights[i] > 0.0 {
                        let hp = self.heads[i].as_ref().expect("aux head");
                        let out = head_forward(tape, &self.params, hp, view)?;
                        losses[i] = Some(detection_loss(tape, &out, &batch.targets, weights)?);
                        heads[i] = Some(out);
                    }
                }
                let fusion = self.fusion.as_ref().expect("fusion layer");
                let fused = fuse(tape, &self.params, fusion, &views.fusion.0, &views.fusion.1)?;
                let hp = self.heads[2].as_ref().expect("fusion head");
                let out = head_forward(tape, &self.params, hp, &fused)?;
                losses[2] = Some(detection_loss(tape, &out, &batch.targets, weights)?);
                heads[2] = Some(out);
                let total = rsc_total_loss(
                    tape,
                    losses[2].map(|l| l.total),
                    losses[0].map(|l| l.total),
                    losses[1].map(|l| l.total),
                    weights,
                )?;
                Ok(ForwardOutputs {
                    images,
                    pyramids,
                    views: Some(views),
                    fused: Some(fused),
                    heads,
                    losses,
                    total,
                })
            }
        }
    }

    /// Per-level `(logits, offsets)` of the inference head.
    pub fn predict(&self, images: &[Tensor<S>; 2]) -> Result<Vec<(Tensor<S>, Tensor<S>)>, DetectorError> {
        let mut tape = Tape::new();
        let (_, pyramids) = self.pyramids(&mut tape, images)?;
        let out = match self.kind {
            ModelKind::Unimodal(b) => {
                let i = b.index();
                head_forward(
                    &mut tape,
                    &self.params,
                    self.heads[i].as_ref().expect("head"),
                    pyramids[i].as_ref().expect("pyramid"),
                )?
            }
            ModelKind::Multimodal => {
                let fused = fuse(
                    &mut tape,
                    &self.params,
                    self.fusion.as_ref().expect("fusion"),
                    pyramids[0].as_ref().expect("pyramid"),
                    pyramids[1].as_ref().expect("pyramid"),
                )?;
                head_forward(
                    &mut tape,
                    &self.params,
                    self.heads[2].as_ref().expect("head"),
                    &fused,
                )?
            }
        };
        Ok(out
            .levels
            .iter()
            .map(|l| (tape.value(l.logits).clone(), tape.value(l.boxes).clone()))
            .collect())
    }
}
