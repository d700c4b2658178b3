use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoupler::PlanSpec;
use crate::detector::{LossWeights, ModelConfig, ModelKind};
use crate::synthgen::{ModalityProfile, SceneSpec};
use crate::train::{DecodeConfig, OptimizerConfig};

/// A configuration problem located by JSON pointer (`/loss/beta`).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid config at {pointer}: {message}")]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    fn at(pointer: &str, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub object_count: [usize; 2],
    pub class_count: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// `[m1, m2]`; m1 is the weak modality by default.
    pub profiles: [ModalityProfile; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            object_count: [1, 4],
            class_count: 3,
            train_samples: 500,
            test_samples: 200,
            profiles: [ModalityProfile::from_quality(0.4), ModalityProfile::from_quality(0.9)],
        }
    }
}

impl DatasetConfig {
    pub fn scene(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            image_size: self.image_size,
            object_count: self.object_count,
            class_count: self.class_count,
            seed,
        }
    }
}

/// One experiment: data, model, optimization, objective and routing.
///
/// `seed` drives data generation, parameter initialization and batch
/// order; the ablation matrix repeats every run for `replicates`
/// consecutive seeds starting at `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub kind: ModelKind,
    pub optimizer: OptimizerConfig,
    pub probe_optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub plan: PlanSpec,
    pub decode: DecodeConfig,
    pub seed: u64,
    pub replicates: usize,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let optimizer = OptimizerConfig {
            initial_lr: 0.05,
            ..OptimizerConfig::default()
        };
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig {
                init_gain: 6f64.sqrt(),
                ..ModelConfig::default()
            },
            kind: ModelKind::Multimodal,
            probe_optimizer: optimizer.clone(),
            optimizer,
            loss: LossWeights {
                lambda_cls: 10.0,
                ..LossWeights::default()
            },
            plan: PlanSpec::default(),
            decode: DecodeConfig::default(),
            seed: 1,
            replicates: 3,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = parse_json(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some((field, msg)) = self.loss.invalid_field() {
            return Err(ConfigError::at(&format!("/loss/{field}"), msg));
        }
        for (name, opt) in [("optimizer", &self.optimizer), ("probe_optimizer", &self.probe_optimizer)] {
            if let Some((field, msg)) = opt.invalid_field() {
                return Err(ConfigError::at(&format!("/{name}/{field}"), msg));
            }
        }
        for (i, p) in self.dataset.profiles.iter().enumerate() {
            p.validate()
                .map_err(|e| ConfigError::at(&format!("/dataset/profiles/{i}"), e.to_string()))?;
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::at("/model", e.to_string()))?;
        let downsample = 1 << self.model.backbone.downsamplings();
        self.dataset
            .scene(self.seed)
            .validate(downsample)
            .map_err(|e| ConfigError::at("/dataset", e.to_string()))?;
        if self.dataset.class_count > self.model.num_classes {
            return Err(ConfigError::at(
                "/dataset/class_count",
                format!(
                    "{} classes exceed the model's {}",
                    self.dataset.class_count, self.model.num_classes
                ),
            ));
        }
        if self.dataset.train_samples == 0 {
            return Err(ConfigError::at("/dataset/train_samples", "must be at least 1"));
        }
        if self.dataset.test_samples == 0 {
            return Err(ConfigError::at("/dataset/test_samples", "must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(ConfigError::at("/replicates", "must be at least 1"));
        }
        let d = &self.decode;
        if !(0.0..=1.0).contains(&d.score_threshold) {
            return Err(ConfigError::at("/decode/score_threshold", "outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&d.nms_iou) {
            return Err(ConfigError::at("/decode/nms_iou", "outside [0, 1]"));
        }
        self.plan
            .resolve()
            .map_err(|e| ConfigError::at("/plan", e.to_string()))?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|k| self.seed + k).collect()
    }
}

/// Deserializes any JSON document, locating failures by JSON pointer.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_of(&e.path().to_string());
        ConfigError::at(&pointer, e.inner().to_string())
    })
}

/// `loss.beta` or `plan[2][0]` as `/loss/beta`, `/plan/2/0`.
fn pointer_of(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split(['.', '[', ']']).filter(|p| !p.is_empty()) {
        out.push('/');
        out.push_str(&part.replace('~', "~0").replace('/', "~1"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn negative_beta_names_beta() {
        let err = ExperimentConfig::from_json(r#"{"loss": {"beta": -1.0}}"#).unwrap_err();
        assert_eq!(err.pointer, "/loss/beta");
        assert!(err.to_string().contains("beta"));
    }

    #[test]
    fn unknown_key_is_located() {
        let err = ExperimentConfig::from_json(r#"{"optimizer": {"lr": 0.1}}"#).unwrap_err();
        assert_eq!(err.pointer, "/optimizer/lr");
        let err = ExperimentConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(err.message.contains("bogus"), "{err}");
    }

    #[test]
    fn type_errors_are_located() {
        let err = ExperimentConfig::from_json(r#"{"dataset": {"train_samples": "x"}}"#).unwrap_err();
        assert_eq!(err.pointer, "/dataset/train_samples");
        let err = ExperimentConfig::from_json(r#"{"dataset": {"profiles": [{"quality": 1}]}}"#)
            .unwrap_err();
        assert!(err.pointer.starts_with("/dataset/profiles"), "{err}");
    }

    #[test]
    fn plan_accepts_presets_and_matrices() {
        let c = ExperimentConfig::from_json(r#"{"plan": "rsc"}"#).unwrap();
        assert_eq!(c.plan.resolve().unwrap(), crate::decoupler::RoutePlan::all_pass());
        let c = ExperimentConfig::from_json(r#"{"plan": [[1,1],[0,1],[0,0]]}"#).unwrap();
        assert_eq!(c.plan.resolve().unwrap().pass_matrix(), [[1, 1], [0, 1], [0, 0]]);
        let err = ExperimentConfig::from_json(r#"{"plan": [[2,0],[0,1],[0,0]]}"#).unwrap_err();
        assert_eq!(err.pointer, "/plan");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
