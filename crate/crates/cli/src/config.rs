//! Run configuration: a TOML file layered over per-system defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttdioc_core::costmodel::fixed_weights;
use ttdioc_core::experiments::{benchmark_config, DataPlan};
use ttdioc_core::{FocpOptions, PhysicalParams, SlidingWindowConfig, SystemKind, TruthProfile, TtdConfig};

/// Sections merged key by key onto the defaults. Everything else replaces.
const MERGED_SECTIONS: [&str; 6] = ["params", "data", "ttd", "kf", "forward", "sweep"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{path}: at `{key}`: {message}")]
    Schema {
        path: PathBuf,
        key: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Dataset plan settings other than the system and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub ts: f64,
    pub horizon: usize,
    pub n_gen: usize,
    pub stride: usize,
    pub initial_states: usize,
    pub validation_every: usize,
    pub state_bound: f64,
    pub time_spread: usize,
    pub seed: u64,
}

/// Targets of the sweep subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub ts: Vec<f64>,
    pub horizons: Vec<usize>,
    pub basis_counts: Vec<usize>,
    pub orders: Vec<u32>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            ts: vec![0.05, 0.2],
            horizons: vec![40, 80],
            basis_counts: vec![1, 2, 3, 4],
            orders: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemKind,
    pub profile: TruthProfile,
    /// Load demonstrations from this file instead of generating them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub params: PhysicalParams,
    pub data: DataSettings,
    pub ttd: TtdConfig,
    pub kf: SlidingWindowConfig,
    pub forward: FocpOptions,
    pub sweep: SweepSettings,
}

#[derive(Deserialize)]
struct Head {
    #[serde(default = "default_system")]
    system: SystemKind,
    #[serde(default = "default_profile")]
    profile: TruthProfile,
}

fn default_system() -> SystemKind {
    SystemKind::Spring3
}

fn default_profile() -> TruthProfile {
    TruthProfile::ThetaM1
}

impl RunConfig {
    /// Every setting filled in for one system and truth profile.
    pub fn defaults(system: SystemKind, profile: TruthProfile) -> Self {
        let plan = match system {
            SystemKind::Spring3 => DataPlan::sys1(),
            SystemKind::Pendulum2 => DataPlan::sys2(),
            SystemKind::Spring1 => DataPlan::spring1(),
        };
        Self {
            system,
            profile,
            dataset: None,
            out_dir: None,
            params: plan.params.clone(),
            data: DataSettings {
                ts: plan.ts,
                horizon: plan.horizon,
                n_gen: plan.n_gen,
                stride: plan.stride,
                initial_states: plan.initial_states,
                validation_every: plan.validation_every,
                state_bound: plan.state_bound,
                time_spread: plan.time_spread,
                seed: plan.seed,
            },
            ttd: benchmark_config(system, profile),
            kf: SlidingWindowConfig {
                anchor: fixed_weights(system)[0],
                ..SlidingWindowConfig::default()
            },
            forward: FocpOptions::default(),
            sweep: SweepSettings::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let syntax = |message: String| ConfigError::Syntax {
            path: origin.to_path_buf(),
            message,
        };
        let schema = |key: String, message: String| ConfigError::Schema {
            path: origin.to_path_buf(),
            key,
            message,
        };
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| syntax(e.message().to_string()))?;

        let head: Head = serde_path_to_error::deserialize(toml::Value::Table(user.clone()))
            .map_err(|e| schema(e.path().to_string(), e.inner().to_string()))?;
        let defaults = Self::defaults(head.system, head.profile);
        let mut merged = toml::Table::try_from(&defaults)
            .map_err(|e| ConfigError::Invalid(format!("default config does not serialize: {e}")))?;
        for (key, value) in user {
            match (merged.get_mut(&key), value) {
                (Some(toml::Value::Table(base)), toml::Value::Table(over))
                    if MERGED_SECTIONS.contains(&key.as_str()) =>
                {
                    merge(base, over)
                }
                (_, value) => {
                    merged.insert(key, value);
                }
            }
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(merged))
            .map_err(|e| schema(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: ttdioc_core::Error| ConfigError::Invalid(e.to_string());
        self.plan().validate().map_err(invalid)?;
        self.ttd.validate().map_err(invalid)?;
        let (_, m) = self.system.dims();
        self.kf.validate(m, fixed_weights(self.system).len() + 1).map_err(invalid)?;
        Ok(())
    }

    pub fn plan(&self) -> DataPlan {
        let d = &self.data;
        DataPlan {
            system: self.system,
            params: self.params.clone(),
            ts: d.ts,
            horizon: d.horizon,
            n_gen: d.n_gen,
            stride: d.stride,
            initial_states: d.initial_states,
            validation_every: d.validation_every,
            state_bound: d.state_bound,
            time_spread: d.time_spread,
            seed: d.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Invalid(format!("config does not serialize: {e}")))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
