use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::detector::{BackboneConfig, DetectorError};
use crate::scalar::Scalar;

/// Three pyramid levels recorded on a tape, finest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Seed and gain shared by every parameter of one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Init {
    pub seed: u64,
    pub gain: f64,
}

/// Draws a parameter from uniform(-k, k), k = gain/sqrt(fan_in).
///
/// The generator is keyed by `(seed, name)`, so a parameter's initial
/// value does not depend on which other parameters exist. Models that
/// share parameter names under one seed start from identical weights.
pub fn init_param<S: Scalar>(init: Init, name: &str, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let digest = Sha256::digest(name.as_bytes());
    let mut key = [0u8; 8];
    key.copy_from_slice(&digest[..8]);
    let mixed = init.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from_le_bytes(key);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let k = init.gain / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.random_range(-k..k))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self, DetectorError> {
        let fan_in = in_ch * kernel * kernel;
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let weight = store.insert(
            &wname,
            init_param(init, &wname, &[out_ch, in_ch, kernel, kernel], fan_in),
        )?;
        let bias = store.insert(&bname, init_param(init, &bname, &[out_ch], fan_in))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Convolution, optionally followed by SiLU.
    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        activate: bool,
    ) -> Result<Var, DetectorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, Some(b), self.stride, self.padding)?;
        Ok(if activate { tape.silu(y) } else { y })
    }
}

/// Stem and stage convolutions of one branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneParams {
    pub stem: Vec<ConvParams>,
    pub stages: Vec<ConvParams>,
    pub probe_stage: usize,
}

impl BackboneParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: Init,
        prefix: &str,
        config: &BackboneConfig,
    ) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut in_ch = config.input_channels;
        let mut stem = Vec::new();
        for (i, &w) in config.stem_widths.iter().enumerate() {
            stem.push(ConvParams::register(
                store,
                init,
                &format!("{prefix}.stem{i}"),
                in_ch,
                w,
                3,
                2,
            )?);
            in_ch = w;
        }
        let mut stages = Vec::new();
        for (i, &w) in config.stage_widths.iter().enumerate() {
            stages.push(ConvParams::register(
                store,
                init,
                &format!("{prefix}.stage{i}"),
                in_ch,
                w,
                3,
                2,
            )?);
            in_ch = w;
        }
        Ok(Self {
            stem,
            stages,
            probe_stage: config.probe_stage_index,
        })
    }

    /// Parameters of the stage whose gradients are monitored.
    pub fn probe_ids(&self) -> [ParamId; 2] {
        self.stages[self.probe_stage].ids()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.stem.iter().chain(&self.stages).flat_map(|c| c.ids()).collect()
    }
}

/// Runs one branch on an `[N, C, H, W]` image batch. Every convolution is
/// followed by SiLU; the last three stage outputs form the pyramid.
pub fn backbone_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &BackboneParams,
    config: &BackboneConfig,
    image: Var,
) -> Result<FeaturePyramid, DetectorError> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != config.input_channels {
        return Err(DetectorError::Config(format!(
            "backbone expects [N, {}, H, W] input, got {shape:?}",
            config.input_channels
        )));
    }
    config.check_input(shape[2], shape[3])?;
    let mut x = image;
    for conv in &params.stem {
        x = conv.apply(tape, store, x, true)?;
    }
    let mut outs = Vec::with_capacity(params.stages.len());
    for conv in &params.stages {
        x = conv.apply(tape, store, x, true)?;
        outs.push(x);
    }
    let levels = outs.split_off(outs.len() - 3);
    Ok(FeaturePyramid { levels })
}

/// Per-level 1x1 projections `W1`, `W2` and a shared bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionParams {
    pub levels: Vec<(ParamId, ParamId, ParamId)>,
}

impl FusionParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: Init,
        prefix: &str,
        widths: [usize; 3],
    ) -> Result<Self, DetectorError> {
        let mut levels = Vec::new();
        for (l, &c) in widths.iter().enumerate() {
            let mut reg = |suffix: &str, shape: &[usize]| {
                let name = format!("{prefix}.level{l}.{suffix}");
                store.insert(&name, init_param(init, &name, shape, c))
            };
            let w1 = reg("w1", &[c, c, 1, 1])?;
            let w2 = reg("w2", &[c, c, 1, 1])?;
            let b = reg("bias", &[c])?;
            levels.push((w1, w2, b));
        }
        Ok(Self { levels })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.levels.iter().flat_map(|&(a, b, c)| [a, b, c]).collect()
    }
}

/// `z = W1 * f1 + W2 * f2 + b` per level, with no activation.
pub fn fuse<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &FusionParams,
    f1: &FeaturePyramid,
    f2: &FeaturePyramid,
) -> Result<FeaturePyramid, DetectorError> {
    if f1.levels.len() != params.levels.len() || f2.levels.len() != params.levels.len() {
        return Err(DetectorError::Config("pyramid depth mismatch in fusion".into()));
    }
    let mut levels = Vec::with_capacity(params.levels.len());
    for (l, &(w1, w2, b)) in params.levels.iter().enumerate() {
        let (a, c) = (f1.levels[l], f2.levels[l]);
        if tape.shape(a) != tape.shape(c) {
            return Err(DetectorError::Config(format!(
                "fusion level {l}: {:?} vs {:?}",
                tape.shape(a),
                tape.shape(c)
            )));
        }
        let w1 = tape.param(store, w1);
        let w2 = tape.param(store, w2);
        let b = tape.param(store, b);
        let p1 = tape.conv2d(a, w1, Some(b), 1, 0)?;
        let p2 = tape.conv2d(c, w2, None, 1, 0)?;
        levels.push(tape.add(p1, p2)?);
    }
    Ok(FeaturePyramid { levels })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadLevelParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub cls: ConvParams,
    pub boxes: ConvParams,
}

/// Detection head: per level a 3x3 and a 1x1 convolution with SiLU, then
/// linear 1x1 projections to class logits and box offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    pub levels: Vec<HeadLevelParams>,
    pub num_classes: usize,
    pub widths: [usize; 3],
}

impl HeadParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: Init,
        prefix: &str,
        widths: [usize; 3],
        num_classes: usize,
    ) -> Result<Self, DetectorError> {
        let mut levels = Vec::new();
        for (l, &c) in widths.iter().enumerate() {
            let p = format!("{prefix}.level{l}");
            levels.push(HeadLevelParams {
                conv1: ConvParams::register(store, init, &format!("{p}.conv1"), c, c, 3, 1)?,
                conv2: ConvParams::register(store, init, &format!("{p}.conv2"), c, c, 1, 1)?,
                cls: ConvParams::register(store, init, &format!("{p}.cls"), c, num_classes, 1, 1)?,
                boxes: ConvParams::register(store, init, &format!("{p}.box"), c, 4, 1, 1)?,
            });
        }
        Ok(Self {
            levels,
            num_classes,
            widths,
        })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.levels
            .iter()
            .flat_map(|l| [l.conv1, l.conv2, l.cls, l.boxes])
            .flat_map(|c| c.ids())
            .collect()
    }
}

/// Outputs at one level: logits `[N, classes, h, w]`, offsets `[N, 4, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLevelOutput {
    pub logits: Var,
    pub boxes: Var,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadOutput {
    pub levels: Vec<HeadLevelOutput>,
}

pub fn head_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &HeadParams,
    pyramid: &FeaturePyramid,
) -> Result<HeadOutput, DetectorError> {
    if pyramid.levels.len() != params.levels.len() {
        return Err(DetectorError::Config(format!(
            "head has {} levels, pyramid has {}",
            params.levels.len(),
            pyramid.levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(params.levels.len());
    for (l, (lp, &x)) in params.levels.iter().zip(&pyramid.levels).enumerate() {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != params.widths[l] {
            return Err(DetectorError::Config(format!(
                "head level {l} expects {} channels, got shape {shape:?}",
                params.widths[l]
            )));
        }
        let h = lp.conv1.apply(tape, store, x, true)?;
        let h = lp.conv2.apply(tape, store, h, true)?;
        let logits = lp.cls.apply(tape, store, h, false)?;
        let boxes = lp.boxes.apply(tape, store, h, false)?;
        levels.push(HeadLevelOutput { logits, boxes });
    }
    Ok(HeadOutput { levels })
}
