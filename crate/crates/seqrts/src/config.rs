//! The JSON run configuration.
//!
//! Every section is optional and defaults to the deployed trial settings.
//! Unknown keys are rejected, and every rejection names its dotted key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqrts_core::ghat::HorizonMode;
use seqrts_core::sampler::{FaultModel, DEFAULT_N0_HAT};
use seqrts_core::sim::{BehaviorParams, SimConfig};
use seqrts_core::trial::{ConfigError, TrialConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub trial: TrialConfig,
    pub behavior: BehaviorParams,
    pub cohort: CohortSection,
    pub history: HistorySection,
    pub sampler: SamplerSection,
    pub fault: FaultModel,
    pub tune: TuneSection,
    pub io: IoSection,
}

/// The evaluation cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub n_participants: u32,
    pub n_days: u32,
    pub seed: u64,
    /// Re-derive the notification lockout from realized treatments.
    pub lockout: bool,
}

impl Default for CohortSection {
    fn default() -> Self {
        CohortSection { n_participants: 50, n_days: 30, seed: 1, lockout: true }
    }
}

/// The historical corpus the remaining-risk model is fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistorySection {
    pub n_participants: u32,
    pub n_days: u32,
    pub seed: u64,
    pub horizon_mode: HorizonMode,
}

impl Default for HistorySection {
    fn default() -> Self {
        HistorySection { n_participants: 40, n_days: 30, seed: 2, horizon_mode: HorizonMode::Day }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Seqrts,
    Oracle,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub n0_hat: f64,
    /// Clip SeqRTS probabilities to the trial's bounds.
    pub clip: bool,
    /// Probability used by the fixed sampler.
    pub fixed_prob: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { kind: SamplerKind::Seqrts, n0_hat: DEFAULT_N0_HAT, clip: true, fixed_prob: 0.0625 }
    }
}

/// Grid search and paired comparison settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub n0_grid: Vec<f64>,
    /// Seed of the tuning cohort; must differ from the evaluation and history seeds.
    pub seed: u64,
    /// Replications of the comparison experiment.
    pub replications: u32,
}

pub fn default_grid() -> Vec<f64> {
    (5..=30).map(|i| i as f64 / 10.0).collect()
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection { n0_grid: default_grid(), seed: 3, replications: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    /// Historical trace CSV to fit the model on instead of a simulated corpus.
    pub trace_csv: Option<PathBuf>,
    /// Fitted model to load instead of fitting one.
    pub model: Option<PathBuf>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            ConfigError::new(key, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        Config::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cohort_sim().validate()?;
        self.history_sim().validate().map_err(|e| {
            if e.key.starts_with("cohort.") {
                ConfigError::new(e.key.replacen("cohort.", "history.", 1), e.message)
            } else {
                e
            }
        })?;
        let s = &self.sampler;
        if !(s.n0_hat.is_finite() && s.n0_hat > 0.0) {
            return Err(ConfigError::new("sampler.n0_hat", "must be a positive number"));
        }
        if !(s.fixed_prob > 0.0 && s.fixed_prob < 1.0) {
            return Err(ConfigError::new("sampler.fixed_prob", "must lie strictly between 0 and 1"));
        }
        if !(0..=23).contains(&self.fault.start_hour_gmt) {
            return Err(ConfigError::new("fault.start_hour_gmt", "must be an hour in 0..=23"));
        }
        let grid = &self.tune.n0_grid;
        if grid.is_empty() {
            return Err(ConfigError::new("tune.n0_grid", "must not be empty"));
        }
        if grid.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ConfigError::new("tune.n0_grid", "values must be positive numbers"));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::new("tune.n0_grid", "must be strictly ascending"));
        }
        if self.tune.replications == 0 {
            return Err(ConfigError::new("tune.replications", "must be at least 1"));
        }
        Ok(())
    }

    pub fn cohort_sim(&self) -> SimConfig {
        self.sim(self.cohort.n_participants, self.cohort.n_days, self.cohort.seed)
    }

    pub fn history_sim(&self) -> SimConfig {
        self.sim(self.history.n_participants, self.history.n_days, self.history.seed)
    }

    pub fn tune_sim(&self) -> SimConfig {
        self.sim(self.cohort.n_participants, self.cohort.n_days, self.tune.seed)
    }

    fn sim(&self, n_participants: u32, n_days: u32, seed: u64) -> SimConfig {
        SimConfig { n_participants, n_days, seed, params: self.behavior.clone(), trial: self.trial.clone() }
    }

    /// The fault model when enabled.
    pub fn active_fault(&self) -> Option<FaultModel> {
        self.fault.enabled.then_some(self.fault)
    }
}
