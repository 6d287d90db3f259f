//! Experiment configuration: a strict JSON schema (unknown keys rejected)
//! with matrices as row-major nested arrays.

use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub sigma_w: f64,
    #[serde(default = "default_noise")]
    pub noise_kind: NoiseKindConfig,
    pub delta: f64,
    pub alpha_bar: f64,
    /// Initial state; defaults to the origin.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    pub warmup: WarmupConfig,
    pub sequence: SequenceConfig,
    /// Optional switch-count sweep (overrides the sequence length per point).
    #[serde(default)]
    pub ns_sweep: Option<Vec<u64>>,
    pub replicates: usize,
    pub seed: u64,
    pub output_dir: String,
    #[serde(default)]
    pub union_bound_delta: bool,
}

fn default_noise() -> NoiseKindConfig {
    NoiseKindConfig::Gaussian
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindConfig {
    Gaussian,
    TruncatedGaussian,
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Named recipe ("scalar-pair", "random-2x1", "dwell-demo") or "explicit".
    pub recipe: String,
    /// Explicit mode list, required when `recipe` is "explicit".
    #[serde(default)]
    pub modes: Option<Vec<ModeConfig>>,
    /// Override for the derived side-information bounds.
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub alpha0: f64,
    pub alpha1: f64,
    pub vartheta: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub t0: u64,
    #[serde(default = "default_kappa0")]
    pub kappa0: f64,
    /// Explicit initial policies per mode; deadbeat-style defaults otherwise.
    #[serde(default)]
    pub k0: Option<Vec<Vec<Vec<f64>>>>,
    /// Constants for the advisory duration check.
    #[serde(default)]
    pub constants: Option<WarmupConstants>,
}

fn default_kappa0() -> f64 {
    3.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WarmupConstants {
    pub epsilon_tilde: f64,
    #[serde(default = "default_second")]
    pub second_order_constant: f64,
}

fn default_second() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SequenceConfig {
    /// Fixed list of mode indices.
    Scripted { modes: Vec<usize> },
    /// Seeded uniform draws with a fixed switch count.
    Seeded {
        switches: u64,
        #[serde(default = "default_true")]
        avoid_repeat: bool,
    },
    /// Seeded draws with a geometric stopping probability.
    Geometric {
        stop_prob: f64,
        max_switches: u64,
        #[serde(default = "default_true")]
        avoid_repeat: bool,
    },
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0 < self.alpha_bar && self.alpha_bar < 1.0) {
            return Err(ConfigError::Invalid("alpha_bar must lie in (0,1)".into()));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(ConfigError::Invalid("delta must lie in (0,1)".into()));
        }
        if self.replicates < 1 {
            return Err(ConfigError::Invalid("replicates must be >= 1".into()));
        }
        if self.sigma_w < 0.0 {
            return Err(ConfigError::Invalid("sigma_w must be >= 0".into()));
        }
        if self.scenario.recipe == "explicit" && self.scenario.modes.is_none() {
            return Err(ConfigError::Invalid(
                "explicit recipe requires modes".into(),
            ));
        }
        if let SequenceConfig::Geometric { stop_prob, .. } = &self.sequence {
            if !(0.0 < *stop_prob && *stop_prob < 1.0) {
                return Err(ConfigError::Invalid("stop_prob must lie in (0,1)".into()));
            }
        }
        Ok(())
    }
}
