//! One experiment, one file.
//!
//! [`ExperimentConfig`] mirrors every module's own configuration type in a
//! single TOML document, section by section. Parsing is strict: unknown
//! keys are hard errors (a typo in a hyperparameter name must not silently
//! fall back to a default), and every syntactic or semantic failure
//! surfaces a diagnostic naming the line or field. Omitted sections and
//! fields take the benchmark's default values.
//!
//! ```toml
//! seed = 7
//! output = "runs/pendulum"
//!
//! [model]
//! dt = 0.05
//! diffusion = 0.1
//!
//! [filter]
//! n_outer = 32
//! m_inner = 128
//! horizon = 50
//!
//! [filter.strategy]
//! kind = "npf"
//!
//! [trainer]
//! iterations = 25
//! learning_rate = 1e-3
//!
//! [eval]
//! rollouts = 16
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::filter::RunConfig;
use crate::model::PendulumConfig;
use crate::policy::PolicyArchConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The TOML error's display names the offending line, column, and key.
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Evaluation workload: how many independent replications each estimate
/// averages over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Information-estimate rollouts.
    pub rollouts: usize,
    /// Contrastive parameter draws per rollout for the lower bound; the
    /// bound's ceiling is `ln(contrastive + 1)`.
    pub contrastive: usize,
    /// Trajectory replications for the realized-gain curve.
    pub replications: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { rollouts: 16, contrastive: 100_000, replications: 128 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rollouts == 0 {
            return Err(ConfigError::Invalid("eval.rollouts must be positive".into()));
        }
        if self.contrastive == 0 {
            return Err(ConfigError::Invalid("eval.contrastive must be positive".into()));
        }
        if self.replications == 0 {
            return Err(ConfigError::Invalid("eval.replications must be positive".into()));
        }
        Ok(())
    }
}

/// The complete description of one experiment. Defaults reproduce the
/// benchmark's standard settings throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; every stream in the run derives from it.
    pub seed: u64,
    /// Directory all artifacts are written into.
    pub output: PathBuf,
    pub model: PendulumConfig,
    pub filter: RunConfig,
    pub policy: PolicyArchConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("out"),
            model: PendulumConfig::default(),
            filter: RunConfig::default(),
            policy: PolicyArchConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate a TOML file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Semantic checks across all sections; syntactic validity is the
    /// parser's job.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if !(m.dt > 0.0 && m.dt.is_finite()) {
            return Err(ConfigError::Invalid("model.dt must be positive and finite".into()));
        }
        if !(m.diffusion > 0.0 && m.diffusion.is_finite()) {
            return Err(ConfigError::Invalid(
                "model.diffusion must be positive and finite".into(),
            ));
        }
        if m.prior_var.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(ConfigError::Invalid(
                "model.prior_var entries must be nonnegative and finite".into(),
            ));
        }
        if m.prior_mean.iter().chain(m.x0.iter()).any(|v| !v.is_finite()) {
            return Err(ConfigError::Invalid(
                "model.prior_mean and model.x0 must be finite".into(),
            ));
        }
        self.filter
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("filter: {e}")))?;
        self.policy
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("policy: {e}")))?;
        self.trainer
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("trainer: {e}")))?;
        self.eval.validate()?;
        if self.output.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("output directory must not be empty".into()));
        }
        Ok(())
    }
}
