//! Versioned TOML configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfo_core::cones::ConeTable;
use sfo_core::de::DeConfig;
use sfo_core::eval::MethodConfig;
use sfo_core::fitness::FitnessConfig;
use sfo_core::synth::{CameraParams, MorphologyParams};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub schema_version: u32,
    /// Cone prior table; the bundled table when absent. Relative paths are
    /// resolved against the config file.
    pub cone_table: Option<PathBuf>,
    /// `max_seconds <= 0` disables the wall-clock budget.
    pub de: DeConfig,
    pub fitness: FitnessConfig,
    pub morphology: MorphologyParams,
    pub camera: CameraParams,
    pub rank: RankSettings,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            cone_table: None,
            de: DeConfig::default(),
            fitness: FitnessConfig::full(),
            morphology: MorphologyParams::default(),
            camera: CameraParams::default(),
            rank: RankSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSettings {
    /// Any of `cones_full`, `cones_skof`, `cones_mse_camera`,
    /// `oracle_direction`.
    pub methods: Vec<String>,
    /// Seeds per photograph, counted up from the global `--seed`.
    pub repeats: usize,
    /// Perturbed direction sets under profile C.
    pub direction_sets: usize,
}

impl Default for RankSettings {
    fn default() -> Self {
        Self {
            methods: vec!["cones_full".into(), "oracle_direction".into()],
            repeats: 3,
            direction_sets: 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("unsupported config schema_version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error("cone table {path}: {reason}")]
    ConeTable { path: PathBuf, reason: String },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("{0}")]
    Invalid(String),
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<(Self, Option<PathBuf>), ConfigError> {
        let Some(path) = path else {
            return Ok((Self::default(), None));
        };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        let cfg = Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.into(),
                source,
            },
            other => other,
        })?;
        Ok((cfg, path.parent().map(Path::to_path_buf)))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: PathBuf::new(),
            source,
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version(cfg.schema_version));
        }
        cfg.morphology
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.de
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if cfg.rank.repeats == 0 {
            return Err(ConfigError::Invalid("rank.repeats must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn cone_table(&self, base: Option<&Path>) -> Result<ConeTable, ConfigError> {
        let Some(rel) = &self.cone_table else {
            return Ok(ConeTable::default_table());
        };
        let path = match base {
            Some(b) if rel.is_relative() => b.join(rel),
            _ => rel.clone(),
        };
        let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::ConeTable {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        ConeTable::from_toml_str(&text).map_err(|e| ConfigError::ConeTable {
            path,
            reason: e.to_string(),
        })
    }

    /// DE settings with the seed and an optional budget override applied.
    pub fn de_config(&self, seed: u64, max_seconds: Option<f64>) -> DeConfig {
        let budget = max_seconds.or(self.de.max_seconds).filter(|s| *s > 0.0);
        DeConfig {
            seed,
            max_seconds: budget,
            ..self.de.clone()
        }
    }

    pub fn methods(&self, de: &DeConfig) -> Result<Vec<MethodConfig>, ConfigError> {
        if self.rank.methods.is_empty() {
            return Err(ConfigError::Invalid("rank.methods is empty".into()));
        }
        self.rank
            .methods
            .iter()
            .map(|name| method_by_name(name, &self.fitness, de))
            .collect()
    }
}

pub fn method_by_name(
    name: &str,
    fitness: &FitnessConfig,
    de: &DeConfig,
) -> Result<MethodConfig, ConfigError> {
    use sfo_core::eval::MethodKind;
    let evolutionary = |fitness: FitnessConfig| MethodConfig {
        name: name.to_string(),
        kind: MethodKind::Evolutionary {
            fitness,
            de: de.clone(),
        },
    };
    match name {
        "cones_full" => Ok(evolutionary(fitness.clone())),
        "cones_skof" => Ok(evolutionary(FitnessConfig {
            use_pll: false,
            ..fitness.clone()
        })),
        "cones_mse_camera" => Ok(evolutionary(FitnessConfig {
            use_skof: false,
            use_pll: false,
            ..fitness.clone()
        })),
        "oracle_direction" => Ok(MethodConfig::oracle_direction()),
        other => Err(ConfigError::UnknownMethod(other.to_string())),
    }
}
