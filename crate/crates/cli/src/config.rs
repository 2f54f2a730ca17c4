//! Run configuration: a single TOML or JSON file plus flag overrides.
//!
//! Flags win over file values; anything still missing falls back to a
//! default or, for required fields (the seed above all — there is no
//! wall-clock fallback), fails validation with the field path.

use aps_ope::data::{CsvSchema, MissingPolicy};
use aps_ope::simlab::{DgpSpec, EffectMode, EstimatorKind, Experiment};
use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub evaluate: Option<EvaluateSection>,
    #[serde(default)]
    pub aps: Option<ApsSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub experiment: Option<Experiment>,
    pub effect_mode: Option<EffectMode>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub deltas: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub aps_draws: Option<usize>,
    pub truth_draws: Option<usize>,
    pub train_n: Option<usize>,
    pub estimators: Option<Vec<EstimatorKind>>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub reward: Option<String>,
    pub action: Option<String>,
    pub features: Option<Vec<String>>,
    #[serde(default)]
    pub discrete_features: Vec<String>,
    pub secondary_reward: Option<String>,
    pub actions: Option<Vec<String>>,
    pub missing: Option<MissingPolicy>,
    /// Skip z-scoring: the feature columns are already standardized.
    #[serde(default)]
    pub assume_normalized: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub ml_policy: Option<PathBuf>,
    pub pi_policy: Option<PathBuf>,
    pub deltas: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub aps_draws: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub chaining: Option<bool>,
    pub ratio_epsilon: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApsSection {
    pub ml_policy: Option<PathBuf>,
    pub deltas: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub aps_draws: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path
        .extension()
        .map(|ext| ext.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    if is_json {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    } else {
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }
}

/// Resolved settings for `simulate`.
pub struct SimulatePlan {
    pub spec: DgpSpec,
    pub reps: usize,
    pub deltas: Vec<f64>,
    pub estimators: Vec<EstimatorKind>,
    pub out_dir: PathBuf,
    pub paper_scale: bool,
}

/// Resolved settings for `evaluate`.
pub struct EvaluatePlan {
    pub data_path: PathBuf,
    pub schema: CsvSchema,
    pub assume_normalized: bool,
    pub ml_policy: PathBuf,
    pub pi_policy: PathBuf,
    pub deltas: Vec<f64>,
    pub seed: u64,
    pub aps_draws: usize,
    pub out_dir: PathBuf,
    pub chaining: bool,
    pub ratio_epsilon: f64,
}

/// Resolved settings for `aps`.
pub struct ApsPlan {
    pub data_path: PathBuf,
    pub schema: CsvSchema,
    pub assume_normalized: bool,
    pub ml_policy: PathBuf,
    pub deltas: Vec<f64>,
    pub seed: u64,
    pub aps_draws: usize,
    pub out_dir: PathBuf,
}

pub fn require<T>(value: Option<T>, field: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("{field}: required, no default")))
}

pub fn validate_deltas(deltas: &[f64], field: &str) -> Result<(), CliError> {
    if deltas.is_empty() {
        return Err(CliError::Config(format!("{field}: need at least one value")));
    }
    for &d in deltas {
        if !(d > 0.0) || !d.is_finite() {
            return Err(CliError::Config(format!(
                "{field}: bandwidths must be positive and finite, got {d}"
            )));
        }
    }
    Ok(())
}

pub fn validate_draws(draws: usize, field: &str) -> Result<(), CliError> {
    if draws == 0 {
        return Err(CliError::Config(format!(
            "{field}: need at least one simulation draw"
        )));
    }
    Ok(())
}

/// Builds the CSV schema from the `[data]` section, checking required fields.
pub fn resolve_schema(data: &DataSection) -> Result<(PathBuf, CsvSchema, bool), CliError> {
    let path = require(data.path.clone(), "data.path")?;
    let reward = require(data.reward.clone(), "data.reward")?;
    let action = require(data.action.clone(), "data.action")?;
    let features = require(data.features.clone(), "data.features")?;
    if features.is_empty() && data.discrete_features.is_empty() {
        return Err(CliError::Config(
            "data.features: need at least one feature column".into(),
        ));
    }
    let schema = CsvSchema {
        reward,
        action,
        features,
        discrete_features: data.discrete_features.clone(),
        secondary_reward: data.secondary_reward.clone(),
        actions: data.actions.clone(),
        missing: data.missing.unwrap_or_default(),
    };
    Ok((path, schema, data.assume_normalized))
}
