//! Experiment configuration files.
//!
//! A single TOML file drives training, evaluation, and reporting. Sections:
//!
//! * `[feeder]`: a builtin network name or a path to a feeder TOML.
//! * `[rl]`: learner hyperparameters plus episode count and reward weight.
//! * `[safety]`: projection tolerances.
//! * `[experiment]`: seed, day counts, step length, power-flow stopping
//!   rule, and the load-profile source (`[experiment.profiles]` for the
//!   synthetic generator, or `profiles_csv` for measurements).
//!
//! Every field has a default, so the empty string is a valid config.
//! Relative paths are resolved against the directory the config was loaded
//! from. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{Feeder, FeederError};
use crate::powerflow::SweepOptions;
use crate::profiles::{
    ingest_profiles, synthetic_dataset, uniform_allocation, IngestError, IngestOptions,
    LoadDataset, SyntheticConfig,
};
use crate::rl::{DdpgConfig, TrainConfig};
use crate::safety::ProjectionOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config is not valid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("[feeder] cannot set both `builtin` and `path`")]
    FeederSource,
    #[error("unknown builtin feeder {0:?}; available: ieee13")]
    UnknownBuiltin(String),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error("failed to load profiles: {0}")]
    Ingest(#[from] IngestError),
}

/// Where the network comes from. Leaving both fields unset selects the
/// builtin 13-bus feeder.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeederSection {
    pub builtin: Option<String>,
    pub path: Option<PathBuf>,
}

/// Learner hyperparameters and training extent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub episodes: usize,
    /// Weight of the control-effort term in the reward.
    pub eta: f64,
    /// Train with the safety projection in the loop.
    pub safe: bool,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub noise_sigma: f64,
    pub noise_decay: f64,
    pub update_every: usize,
    pub warmup_steps: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        let d = DdpgConfig::default();
        RlSection {
            episodes: 60,
            eta: 0.1,
            safe: false,
            gamma: d.gamma,
            tau: d.tau,
            actor_lr: d.actor_lr,
            critic_lr: d.critic_lr,
            buffer_capacity: d.buffer_capacity,
            batch_size: d.batch_size,
            hidden: d.hidden,
            noise_sigma: d.noise_sigma,
            noise_decay: d.noise_decay,
            update_every: d.update_every,
            warmup_steps: d.warmup_steps,
        }
    }
}

impl RlSection {
    pub fn ddpg(&self) -> DdpgConfig {
        DdpgConfig {
            gamma: self.gamma,
            tau: self.tau,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            buffer_capacity: self.buffer_capacity,
            batch_size: self.batch_size,
            hidden: self.hidden,
            noise_sigma: self.noise_sigma,
            noise_decay: self.noise_decay,
            update_every: self.update_every,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// Projection solver tolerances and band margins.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetySection {
    pub tol: f64,
    pub max_iterations: usize,
    pub penalty: f64,
    /// Tightens the enforced lower voltage bound (per-unit squared).
    pub lower_margin: f64,
    /// Tightens the enforced upper voltage bound (per-unit squared).
    pub upper_margin: f64,
}

impl Default for SafetySection {
    fn default() -> Self {
        let d = ProjectionOptions::default();
        SafetySection {
            tol: d.tol,
            max_iterations: d.max_iterations,
            penalty: d.penalty,
            lower_margin: d.lower_margin,
            upper_margin: d.upper_margin,
        }
    }
}

impl SafetySection {
    pub fn options(&self) -> ProjectionOptions {
        ProjectionOptions {
            tol: self.tol,
            max_iterations: self.max_iterations,
            penalty: self.penalty,
            lower_margin: self.lower_margin,
            upper_margin: self.upper_margin,
        }
    }
}

/// Seeds, day counts, simulation cadence, and the profile source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seed: u64,
    pub train_days: usize,
    pub test_days: usize,
    /// Simulation step in seconds; must divide a day.
    pub step_seconds: u64,
    pub sweep_tolerance: f64,
    pub sweep_max_iterations: usize,
    /// Measurement CSV with columns timestamp, demand_mw[, pv_mw].
    /// When unset, days come from the synthetic generator below.
    pub profiles_csv: Option<PathBuf>,
    pub profiles: SyntheticConfig,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let sweep = SweepOptions::default();
        ExperimentSection {
            seed: 1,
            train_days: 12,
            test_days: 8,
            step_seconds: 300,
            sweep_tolerance: sweep.tolerance,
            sweep_max_iterations: sweep.max_iterations,
            profiles_csv: None,
            profiles: SyntheticConfig::default(),
        }
    }
}

/// The whole experiment file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub feeder: FeederSection,
    pub rl: RlSection,
    pub safety: SafetySection,
    pub experiment: ExperimentSection,
    /// Directory paths inside the file are relative to. Set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(cfg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn feeder(&self) -> Result<Feeder, ConfigError> {
        match (&self.feeder.builtin, &self.feeder.path) {
            (Some(_), Some(_)) => Err(ConfigError::FeederSource),
            (Some(name), None) => match name.as_str() {
                "ieee13" => Ok(crate::feeder::fixtures::ieee13()),
                other => Err(ConfigError::UnknownBuiltin(other.to_string())),
            },
            (None, Some(path)) => Ok(Feeder::load(self.resolve(path))?),
            (None, None) => Ok(crate::feeder::fixtures::ieee13()),
        }
    }

    pub fn dataset(&self, feeder: &Feeder) -> Result<LoadDataset, ConfigError> {
        let e = &self.experiment;
        let allocation = uniform_allocation(feeder);
        match &e.profiles_csv {
            Some(path) => {
                let file = std::fs::File::open(self.resolve(path))?;
                let opts = IngestOptions {
                    step_seconds: e.step_seconds,
                    power_factor_tan: e.profiles.power_factor_tan,
                    train_days: e.train_days,
                };
                Ok(ingest_profiles(
                    file,
                    feeder,
                    &allocation,
                    &allocation,
                    &opts,
                )?)
            }
            None => Ok(synthetic_dataset(
                feeder,
                &e.profiles,
                &allocation,
                e.train_days,
                e.test_days,
                e.step_seconds,
                e.seed,
            )),
        }
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            tolerance: self.experiment.sweep_tolerance,
            max_iterations: self.experiment.sweep_max_iterations,
        }
    }

    pub fn projection_options(&self) -> ProjectionOptions {
        self.safety.options()
    }

    /// Assembles the training configuration; `safe_override` lets the CLI
    /// flag win over the file.
    pub fn train_config(&self, safe_override: Option<bool>) -> TrainConfig {
        TrainConfig {
            ddpg: self.rl.ddpg(),
            episodes: self.rl.episodes,
            eta: self.rl.eta,
            seed: self.experiment.seed,
            safe: safe_override.unwrap_or(self.rl.safe),
            projection: self.projection_options(),
            sweep: self.sweep_options(),
        }
    }
}
