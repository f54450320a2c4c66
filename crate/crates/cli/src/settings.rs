//! Resolved per-command settings. Precedence: built-in defaults, then the
//! matching table of the `--config` file, then command-line flags.
//!
//! Output paths are deliberately not part of these structs: the resolved
//! settings are embedded in every artifact, and re-running them must give
//! the same bytes wherever the result is written.

use std::path::{Path, PathBuf};

use floe_core::assim::{FilterKind, NoiseSchedule};
use floe_core::cn::{History, Target};
use floe_core::Activation;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub floes: usize,
    pub domain: (f64, f64),
    pub steps: usize,
    pub dt: f64,
    /// Number of trajectories; more than one writes a directory.
    pub count: usize,
    pub radius: f64,
    pub thickness: f64,
    pub youngs_modulus: f64,
    pub density: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Which trajectory of a corpus this is (set per output file).
    pub index: usize,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            floes: 10,
            domain: (0.0, 100.0),
            steps: 10_000,
            dt: 1e-4,
            count: 1,
            radius: 1.0,
            thickness: 1.0,
            youngs_modulus: floe_core::dem::DEFAULT_YOUNGS_MODULUS,
            density: floe_core::dem::DEFAULT_DENSITY,
            speed_min: 150.0,
            speed_max: 200.0,
            index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Trajectory files or directories of them.
    pub data: Vec<PathBuf>,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub validation_fraction: f64,
    pub contact_fraction: f64,
    pub activation: Activation,
    pub history: History,
    pub target: Target,
    pub residual: bool,
    pub message_width: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let hyper = floe_core::cn::TrainConfig::default();
        let model = floe_core::cn::CnConfig::default();
        Self {
            data: Vec::new(),
            epochs: hyper.epochs,
            pairs_per_epoch: hyper.pairs_per_epoch,
            batch_size: hyper.batch_size,
            learning_rate: hyper.learning_rate,
            lr_decay: hyper.lr_decay,
            validation_fraction: hyper.validation_fraction,
            contact_fraction: hyper.contact_fraction,
            activation: model.activation,
            history: model.history,
            target: model.target,
            residual: model.residual,
            message_width: model.message_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSettings {
    pub checkpoint: PathBuf,
    /// Reference trajectory; its first two states seed the run.
    pub truth: PathBuf,
    /// Predicted steps; defaults to the rest of the reference.
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssimilateSettings {
    pub checkpoint: PathBuf,
    pub truth: PathBuf,
    pub filter: FilterKind,
    pub members: usize,
    pub sigma_model: f64,
    pub sigma_obs: f64,
    pub interval: usize,
    /// Observed floe indices; empty means every even-indexed floe.
    pub observe: Vec<usize>,
    pub inflation: f64,
    pub noise_schedule: NoiseSchedule,
}

impl Default for AssimilateSettings {
    fn default() -> Self {
        let d = floe_core::AssimConfig::default();
        Self {
            checkpoint: PathBuf::new(),
            truth: PathBuf::new(),
            filter: d.filter,
            members: d.ensemble_size,
            sigma_model: d.sigma_model,
            sigma_obs: d.sigma_obs,
            interval: d.interval,
            observe: Vec::new(),
            inflation: d.inflation,
            noise_schedule: d.noise_schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub checkpoint: PathBuf,
    pub truth: PathBuf,
    /// Existing free run to score; rolled out from the checkpoint if absent.
    pub prediction: Option<PathBuf>,
    /// Extra horizons (steps) to sweep on the same reference.
    pub horizons: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub trajectory: PathBuf,
    pub start: usize,
    pub end: Option<usize>,
    pub stride: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            trajectory: PathBuf::new(),
            start: 0,
            end: None,
            stride: 10,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub generate: Option<toml::Value>,
    #[serde(default)]
    pub train: Option<toml::Value>,
    #[serde(default)]
    pub rollout: Option<toml::Value>,
    #[serde(default)]
    pub assimilate: Option<toml::Value>,
    #[serde(default)]
    pub evaluate: Option<toml::Value>,
    #[serde(default)]
    pub render: Option<toml::Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Settings for one command: defaults overlaid with its table, if any.
    pub fn section<T: DeserializeOwned + Default>(&self, table: Option<&toml::Value>, name: &str) -> Result<T, CliError> {
        match table {
            None => Ok(T::default()),
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| CliError::Usage(format!("config [{name}]: {e}"))),
        }
    }
}

/// Settings recovered from an artifact's embedded provenance.
pub fn from_json<T: DeserializeOwned>(value: &serde_json::Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(value.clone()).map_err(|e| CliError::Data(format!("embedded {what} config: {e}")))
}

pub fn to_json<T: Serialize>(settings: &T) -> serde_json::Value {
    serde_json::to_value(settings).expect("settings serialize")
}

/// Parses `a,b` into a pair of floats.
pub fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `LEFT,RIGHT`, got `{s}`"))?;
    let a = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((a, b))
}
