//! Run configuration: one JSON file drives the whole pipeline.
//!
//! `RunConfig::default()` carries the reference hyperparameters (gamma 2.5,
//! epsilon 0.2, beta 0.999, lr 1e-4, weight decay 1e-4, restart period 10,
//! clip 1.0, min delta 0.001, CLAHE 2.0 with an 8x8 grid, 512x1024 target).
//! The CLI starts from the desk-scale profile (128x256, mini models) unless
//! `--paper-scale` restores the full resolution and larger specs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SynthConfig;
use crate::ensemble::WeightMetric;
use crate::nn::model::{default_model_specs, paper_scale_model_specs};
use crate::nn::ModelSpec;
use crate::preprocess::{AugmentConfig, ClaheParams, ResizeSpec};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("override {key}: {reason}")]
    BadOverride { key: String, reason: String },
    #[error("bad config value: {0}")]
    Invalid(String),
}

/// Splitting fractions and oversampling toggle for the data pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    pub synth: SynthConfig,
    /// Fraction of all records held out as the test split.
    pub test_fraction: f64,
    /// Train fraction within the remaining records (the rest validates).
    pub train_fraction: f64,
    /// Oversample the training minority class to parity.
    pub oversample: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSection {
    pub clahe: ClaheParams,
    pub resize: ResizeSpec,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSection {
    pub gamma: f64,
    pub epsilon: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSection {
    pub metric: WeightMetric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedModelSpec {
    pub name: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub models: Vec<NamedModelSpec>,
    pub loss: LossSection,
    pub train: TrainConfig,
    pub ensemble: EnsembleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::paper_scale(42)
    }
}

fn assemble(seed: u64, image_size: (usize, usize), models: Vec<(String, ModelSpec)>) -> RunConfig {
    RunConfig {
        seed,
        dataset: DatasetSection {
            synth: SynthConfig {
                image_size,
                seed,
                ..SynthConfig::default()
            },
            test_fraction: 0.2,
            train_fraction: 0.8,
            oversample: true,
        },
        preprocess: PreprocessSection {
            clahe: ClaheParams::default(),
            resize: ResizeSpec {
                target: image_size,
                pad_value: 0.0,
            },
            augment: AugmentConfig {
                seed: crate::mix_seed(seed, 0xa06),
                ..AugmentConfig::default()
            },
        },
        models: models
            .into_iter()
            .map(|(name, spec)| NamedModelSpec { name, spec })
            .collect(),
        loss: LossSection {
            gamma: 2.5,
            epsilon: 0.2,
            beta: 0.999,
        },
        train: TrainConfig {
            seed: crate::mix_seed(seed, 0x7a),
            ..TrainConfig::default()
        },
        ensemble: EnsembleSection {
            metric: WeightMetric::F1,
        },
    }
}

impl RunConfig {
    /// Desk-scale profile: 128x256 working resolution, mini architectures.
    pub fn desk_scale(seed: u64) -> Self {
        let size = (128, 256);
        assemble(seed, size, default_model_specs(size, seed))
    }

    /// Full-resolution profile: 512x1024 with larger specs.
    pub fn paper_scale(seed: u64) -> Self {
        let size = (512, 1024);
        assemble(seed, size, paper_scale_model_specs(size, seed))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return bad(format!("test_fraction {}", self.dataset.test_fraction));
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return bad(format!("train_fraction {}", self.dataset.train_fraction));
        }
        self.dataset
            .synth
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.preprocess
            .clahe
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let a = &self.preprocess.augment;
        if !(0.0..=1.0).contains(&a.vflip_prob) || !(0.0..=1.0).contains(&a.blur_prob) {
            return bad("augment probabilities must lie in [0,1]".into());
        }
        if a.rotation_max_deg < 0.0 || a.blur_sigma_max < 0.0 || a.brightness_delta_max < 0.0 {
            return bad("augment magnitudes must be non-negative".into());
        }
        if self.models.is_empty() {
            return bad("no model specs".into());
        }
        for m in &self.models {
            m.spec
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("model {}: {e}", m.name)))?;
        }
        if self.loss.gamma < 0.0 || self.loss.gamma.is_nan() {
            return bad(format!("gamma {}", self.loss.gamma));
        }
        if !(0.0..1.0).contains(&self.loss.epsilon) {
            return bad(format!("epsilon {}", self.loss.epsilon));
        }
        if !(0.0..1.0).contains(&self.loss.beta) {
            return bad(format!("beta {}", self.loss.beta));
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_json()).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(cfg)
    }

    /// Apply dotted-key overrides (`loss.gamma=2.0`) onto the JSON form.
    /// Values parse as JSON when possible, falling back to strings.
    pub fn apply_overrides(&self, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in overrides {
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            let pointer = format!("/{}", key.replace('.', "/"));
            let slot = value
                .pointer_mut(&pointer)
                .ok_or_else(|| ConfigError::BadOverride {
                    key: key.clone(),
                    reason: "no such field".into(),
                })?;
            *slot = parsed;
        }
        serde_json::from_value(value).map_err(|e| ConfigError::BadOverride {
            key: overrides
                .iter()
                .map(|(k, _)| k.as_str())
                .collect::<Vec<_>>()
                .join(","),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.loss.gamma, 2.5);
        assert_eq!(cfg.loss.epsilon, 0.2);
        assert_eq!(cfg.loss.beta, 0.999);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        assert_eq!(cfg.train.restart_period, 10);
        assert_eq!(cfg.train.max_epochs, 100);
        assert_eq!(cfg.train.early_stop_min_delta, 0.001);
        assert_eq!(cfg.train.grad_clip_max_norm, 1.0);
        assert_eq!(cfg.preprocess.clahe.clip_limit, 2.0);
        assert_eq!(cfg.preprocess.clahe.tiles, (8, 8));
        assert_eq!(cfg.preprocess.resize.target, (512, 1024));
        assert_eq!(cfg.models.len(), 4);
    }

    #[test]
    fn desk_profile_shrinks_resolution_only() {
        let cfg = RunConfig::desk_scale(7);
        assert_eq!(cfg.preprocess.resize.target, (128, 256));
        assert_eq!(cfg.dataset.synth.image_size, (128, 256));
        assert_eq!(cfg.loss.gamma, 2.5);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        for m in &cfg.models {
            assert_eq!(m.spec.input_size, (128, 256));
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json_unchanged() {
        for cfg in [RunConfig::desk_scale(3), RunConfig::paper_scale(3)] {
            let json = cfg.to_json();
            let back: RunConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back.to_json(), json);
        }
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let cfg = RunConfig::desk_scale(1);
        let out = cfg
            .apply_overrides(&[
                ("loss.gamma".into(), "3.0".into()),
                ("train.batch_size".into(), "16".into()),
                ("models.0.spec.dropout".into(), "0.4".into()),
                ("ensemble.metric".into(), "\"auc\"".into()),
            ])
            .unwrap();
        assert_eq!(out.loss.gamma, 3.0);
        assert_eq!(out.train.batch_size, 16);
        assert_eq!(out.models[0].spec.dropout, 0.4);
        assert_eq!(out.ensemble.metric, WeightMetric::Auc);
    }

    #[test]
    fn bad_override_keys_are_named() {
        let cfg = RunConfig::desk_scale(1);
        let err = cfg
            .apply_overrides(&[("loss.nope".into(), "1".into())])
            .unwrap_err()
            .to_string();
        assert!(err.contains("loss.nope"), "{err}");
    }

    #[test]
    fn validation_rejects_broken_configs() {
        let mut cfg = RunConfig::desk_scale(1);
        cfg.loss.epsilon = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_scale(1);
        cfg.dataset.test_fraction = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_scale(1);
        cfg.preprocess.augment.vflip_prob = 1.5;
        assert!(cfg.validate().is_err());
    }
}
