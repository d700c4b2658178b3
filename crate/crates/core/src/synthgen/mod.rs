//! Deterministic paired-modality detection scenes.
//!
//! Objects are rectangles, discs and triangles (classes 0, 1, 2). The
//! first modality renders them as filled, striped surfaces over a
//! textured background; the second as soft bright silhouettes on a dark
//! background. Each modality is then degraded by its profile: contrast
//! compression, additive Gaussian noise and per-object dropout.

mod io;
mod render;

pub use io::{read_dataset, write_dataset, Dataset, DatasetManifest, SampleEntry, FORMAT_VERSION};
pub use render::generate_sample;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::detector::Annotation;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt dataset file {path}: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("missing sample file {0}")]
    Missing(String),
    #[error("checksum mismatch for {0}")]
    Checksum(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub object_count: [usize; 2],
    pub class_count: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            object_count: [1, 4],
            class_count: 3,
            seed: 7,
        }
    }
}

impl SceneSpec {
    /// `downsample` is the product of the detector's strides; the image
    /// side must be a multiple of it.
    pub fn validate(&self, downsample: usize) -> Result<(), SynthError> {
        if self.image_size == 0 || self.image_size % downsample != 0 {
            return Err(SynthError::Invalid(format!(
                "image_size {} must be a positive multiple of {downsample}",
                self.image_size
            )));
        }
        if self.image_size < 16 {
            return Err(SynthError::Invalid("image_size must be at least 16".into()));
        }
        let [lo, hi] = self.object_count;
        if lo == 0 || lo > hi {
            return Err(SynthError::Invalid(format!(
                "object_count range [{lo}, {hi}] must satisfy 1 <= min <= max"
            )));
        }
        if !(1..=3).contains(&self.class_count) {
            return Err(SynthError::Invalid(format!(
                "class_count {} must be 1, 2 or 3",
                self.class_count
            )));
        }
        Ok(())
    }
}

/// Degradation applied to one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityProfile {
    pub quality: f64,
    pub noise_sigma: f64,
    pub contrast: f64,
    pub dropout_prob: f64,
}

impl ModalityProfile {
    /// Profile interpolated linearly from perfect (quality 1) so that
    /// quality 0.4 gives noise 0.25, contrast 0.5 and dropout 0.15.
    pub fn from_quality(quality: f64) -> Self {
        let loss = 1.0 - quality;
        Self {
            quality,
            noise_sigma: loss * 0.25 / 0.6,
            contrast: 1.0 - loss * 0.5 / 0.6,
            dropout_prob: loss * 0.25,
        }
    }

    pub fn perfect() -> Self {
        Self::from_quality(1.0)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if !(0.0..=1.0).contains(&self.quality) {
            return bad(format!("quality {} outside [0, 1]", self.quality));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast {} outside (0, 1]", self.contrast));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return bad(format!("dropout_prob {} outside [0, 1]", self.dropout_prob));
        }
        if self.quality == 1.0
            && (self.noise_sigma != 0.0 || self.contrast != 1.0 || self.dropout_prob != 0.0)
        {
            return bad("quality 1 requires noise 0, contrast 1 and dropout 0".into());
        }
        Ok(())
    }
}

/// One paired scene. Images are `[1, size, size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    pub image_m1: Tensor<f64>,
    pub image_m2: Tensor<f64>,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
    pub visibility: Vec<(bool, bool)>,
}

impl ModalitySample {
    pub fn annotation(&self) -> Annotation {
        Annotation {
            boxes: self.boxes.clone(),
            classes: self.classes.clone(),
        }
    }

    /// Annotation restricted to objects visible in one modality.
    pub fn visible_annotation(&self, modality: usize) -> Annotation {
        let keep: Vec<usize> = (0..self.boxes.len())
            .filter(|&i| {
                let (a, b) = self.visibility[i];
                if modality == 0 { a } else { b }
            })
            .collect();
        Annotation {
            boxes: keep.iter().map(|&i| self.boxes[i]).collect(),
            classes: keep.iter().map(|&i| self.classes[i]).collect(),
        }
    }

    pub fn image(&self, modality: usize) -> &Tensor<f64> {
        if modality == 0 {
            &self.image_m1
        } else {
            &self.image_m2
        }
    }
}

/// Samples `first_index .. first_index + count`, generated in parallel.
pub fn generate_split(
    spec: &SceneSpec,
    profiles: &[ModalityProfile; 2],
    first_index: u64,
    count: usize,
) -> Vec<ModalitySample> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, &profiles[0], &profiles[1], first_index + i))
        .collect()
}
