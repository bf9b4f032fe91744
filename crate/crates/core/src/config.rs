//! Engine configuration loaded from a JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitors::RuleThresholds;
use crate::perfmodel::{SlaTarget, Workload};
use crate::predictor::PredictorConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Cadence {
    pub rules_s: u64,
    pub predictor_s: u64,
    pub ai_s: u64,
}

impl Default for Cadence {
    fn default() -> Self {
        Self { rules_s: 30, predictor_s: 60, ai_s: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpgradeConfig {
    pub at_s: u64,
    pub target_version: String,
    /// Wait bound for GREEN after each restart.
    pub green_timeout_s: u64,
}

impl Default for UpgradeConfig {
    fn default() -> Self {
        Self { at_s: 600, target_version: "8.12.0".into(), green_timeout_s: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardianConfig {
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub sla: SlaTarget,
    pub workload: Workload,
    pub thresholds: RuleThresholds,
    pub cadence: Cadence,
    pub predictor: PredictorConfig,
    /// Scenario file or bundled scenario name.
    pub scenario: Option<String>,
    pub out_dir: Option<PathBuf>,
    /// Defaults to `incidents.jsonl` inside the output directory.
    pub memory_path: Option<PathBuf>,
    pub zero_noise: bool,
    pub stabilize_timeout_s: u64,
    pub upgrade: Option<UpgradeConfig>,
    pub max_iterations: u32,
    pub max_tokens: u64,
    /// Simulated seconds consumed by each executed tool call.
    pub tool_settle_s: u64,
    pub plan_cooldown_s: u64,
    /// Samples per probe in the rolling latency median.
    pub probe_window: usize,
    /// Look-back for the precursor signature stored with each incident.
    pub precursor_window_s: u64,
}

impl Default for GuardianConfig {
    fn default() -> Self {
        Self {
            seed: None,
            sla: SlaTarget::benchmark(300.0),
            workload: Workload::Mixed,
            thresholds: RuleThresholds::default(),
            cadence: Cadence::default(),
            predictor: PredictorConfig::default(),
            scenario: None,
            out_dir: None,
            memory_path: None,
            zero_noise: false,
            stabilize_timeout_s: 600,
            upgrade: None,
            max_iterations: 20,
            max_tokens: 150_000,
            tool_settle_s: 5,
            plan_cooldown_s: 1800,
            probe_window: 5,
            precursor_window_s: 1800,
        }
    }
}

impl GuardianConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.cadence;
        if c.rules_s == 0 || c.predictor_s == 0 || c.ai_s == 0 {
            return Err(ConfigError::Invalid("cadences must be positive".into()));
        }
        if self.max_iterations == 0 || self.max_tokens == 0 {
            return Err(ConfigError::Invalid("loop budget must be positive".into()));
        }
        if self.probe_window == 0 {
            return Err(ConfigError::Invalid("probe_window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.predictor.min_similarity) {
            return Err(ConfigError::Invalid("min_similarity must be in [0,1]".into()));
        }
        self.thresholds.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sla.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn memory_file(&self) -> Option<PathBuf> {
        self.memory_path.clone().or_else(|| self.out_dir.as_ref().map(|d| d.join("incidents.jsonl")))
    }
}
