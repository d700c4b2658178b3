//! SGD training, AP evaluation, frozen-backbone probing and gradient
//! tracing.

mod eval;
mod fit;
mod probe;
mod trace;

pub use eval::{
    average_precision, decode_levels, evaluate, iou, nms, DecodeConfig, Detection, EvalResult,
    IOU_THRESHOLDS,
};
pub use fit::train;
pub use probe::{linear_probe, parameter_digest, ProbeResult};
pub use trace::{gradient_ratio_report, BranchRatio, GradientTrace, TraceRecord};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::detector::{assign_targets, Annotation, Batch, DetectorError, ModelConfig};
use crate::scalar::Scalar;
use crate::synthgen::ModalitySample;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: usize, term: &'static str },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-2,
            final_lr: 1e-6,
            momentum: 0.937,
            weight_decay: 1e-5,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Offending field name and message, if any. A zero learning rate is
    /// admitted so that frozen runs can be expressed.
    pub fn invalid_field(&self) -> Option<(&'static str, String)> {
        if !(self.final_lr >= 0.0 && self.final_lr <= self.initial_lr && self.initial_lr.is_finite())
        {
            return Some((
                "final_lr",
                format!(
                    "need 0 <= final_lr ({}) <= initial_lr ({})",
                    self.final_lr, self.initial_lr
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Some(("momentum", format!("{} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Some(("weight_decay", format!("{} must be >= 0", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Some(("epochs", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Some(("batch_size", "must be at least 1".into()));
        }
        None
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        match self.invalid_field() {
            Some((field, msg)) => Err(TrainError::Config(format!("{field}: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    /// Linear decay with `lr(0) = initial_lr` and
    /// `lr(total_steps - 1) = final_lr`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.initial_lr;
        }
        let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
        self.initial_lr * (1.0 - t) + self.final_lr * t
    }
}

/// One momentum SGD step with L2 weight decay:
/// `g += wd * w; m = mu * m + g; w -= lr * m`.
pub fn sgd_step<S: Scalar>(
    store: &mut ParamStore<S>,
    ids: &[ParamId],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (S::of(lr), S::of(momentum), S::of(weight_decay));
    for &id in ids {
        let p = store.get_mut(id);
        let w = p.value.data_mut();
        let g = p.grad.data();
        let m = p.momentum.data_mut();
        for k in 0..w.len() {
            let step = g[k] + wd * w[k];
            m[k] = mu * m[k] + step;
            w[k] -= lr * m[k];
        }
    }
}

/// Epoch order of sample indices, fixed by `(seed, epoch)`.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Stacks `[C, H, W]` images into `[N, C, H, W]`.
pub(crate) fn stack<S: Scalar>(items: &[&Tensor<f64>]) -> Tensor<S> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items
        .iter()
        .flat_map(|t| t.data().iter().map(|&x| S::of(x)))
        .collect();
    Tensor::new(shape, data).expect("stacked shape")
}

pub(crate) fn image_size(samples: &[ModalitySample]) -> Result<(usize, usize), TrainError> {
    let first = samples.first().ok_or(TrainError::EmptyDataset)?;
    let shape = first.image_m1.shape();
    Ok((shape[1], shape[2]))
}

pub(crate) fn check_classes(samples: &[ModalitySample], num_classes: usize) -> Result<(), TrainError> {
    for (i, s) in samples.iter().enumerate() {
        if let Some(&c) = s.classes.iter().find(|&&c| c >= num_classes) {
            return Err(TrainError::Mismatch(format!(
                "sample {i} has class {c} but the model has {num_classes} classes"
            )));
        }
    }
    Ok(())
}

/// Stacks samples into a batch with dense targets from the full
/// annotations.
pub fn make_batch<S: Scalar>(
    samples: &[&ModalitySample],
    config: &ModelConfig,
) -> Result<Batch<S>, TrainError> {
    let images = [0, 1].map(|m| {
        let imgs: Vec<&Tensor<f64>> = samples.iter().map(|s| s.image(m)).collect();
        stack::<S>(&imgs)
    });
    let annotations: Vec<Annotation> = samples.iter().map(|s| s.annotation()).collect();
    let shape = images[0].shape();
    let targets = assign_targets(
        &annotations,
        shape[2],
        shape[3],
        &config.backbone,
        config.num_classes,
    )?;
    Ok(Batch {
        images,
        targets,
        annotations,
    })
}
