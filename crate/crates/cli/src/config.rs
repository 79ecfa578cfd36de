//! Run configuration: a TOML file with one table per pipeline stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ufl_core::bank::DEFAULT_TAU;
use ufl_core::data::SynthConfig;
use ufl_core::hierarchy::Linkage;
use ufl_core::knn::DEFAULT_K;
use ufl_core::models::EncoderConfig;
use ufl_core::outliers::StdConvention;
use ufl_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Train/test split of extracted chips, stratified by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipSettings {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ChipSettings {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub k: usize,
    pub tau: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    pub k: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self { k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierSettings {
    pub sigmas: f64,
    pub std: StdConvention,
}

impl Default for OutlierSettings {
    fn default() -> Self {
        Self {
            sigmas: 2.0,
            std: StdConvention::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchySettings {
    pub linkage: Linkage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectSettings {
    pub seed: u64,
}

/// Every tunable of every command. Missing tables and keys take defaults;
/// command-line flags are applied on top.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub chip: ChipSettings,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub search: SearchSettings,
    pub outliers: OutlierSettings,
    pub hierarchy: HierarchySettings,
    pub project: ProjectSettings,
}

impl RunConfig {
    /// Defaults when `path` is `None`. A named file that is missing or
    /// malformed is a usage error.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = self.to_toml()?;
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_tables_fill_in_defaults() {
        let cfg: RunConfig =
            toml::from_str("[train]\nepochs = 3\n[encoder]\nembedding_dim = 16\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.tau, 0.07);
        assert_eq!(cfg.encoder.embedding_dim, 16);
        assert_eq!(cfg.encoder.input_height, 32);
        assert_eq!(cfg.eval.k, 50);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[eval]\nkk = 3\n").is_err());
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = RunConfig::load(Some(Path::new("/definitely/not/here.toml"))).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
