//! Run configuration: defaults, TOML config file, CLI-flag overrides, and
//! the effective-config echo written to the output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use drrd_core::embed::DbowConfig;
use drrd_core::model::TrainConfig;
use drrd_core::synth::{decay_profile, SynthConfig};

use crate::AppError;

/// Merged view of all pipeline knobs. Every field has a default; a TOML
/// config file overrides the defaults and CLI flags override the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage forks its own stream from it.
    pub seed: u64,
    pub synth: SynthSection,
    pub embed: EmbedSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            synth: SynthSection::default(),
            embed: EmbedSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub events: usize,
    pub balance: f64,
    pub horizon_hours: usize,
    /// Expected posts per hour; when empty, a spike-then-decay default
    /// matching the horizon is used.
    pub rumour_intensity: Vec<f64>,
    pub non_rumour_intensity: Vec<f64>,
    pub users: usize,
    pub suspicious_fraction: f64,
    pub rumour_affinity: f64,
    pub vocab_size: usize,
    pub token_skew: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            events: d.n_events,
            balance: d.class_balance,
            horizon_hours: d.horizon_hours,
            rumour_intensity: Vec::new(),
            non_rumour_intensity: Vec::new(),
            users: d.user_pool,
            suspicious_fraction: d.suspicious_fraction,
            rumour_affinity: d.rumour_affinity,
            vocab_size: d.vocab_size,
            token_skew: d.token_skew,
        }
    }
}

impl SynthSection {
    pub fn to_synth_config(&self, seed: u64) -> SynthConfig {
        let rumour_intensity = if self.rumour_intensity.is_empty() {
            decay_profile(8.0, 0.60, self.horizon_hours)
        } else {
            self.rumour_intensity.clone()
        };
        let non_rumour_intensity = if self.non_rumour_intensity.is_empty() {
            decay_profile(3.0, 0.78, self.horizon_hours)
        } else {
            self.non_rumour_intensity.clone()
        };
        SynthConfig {
            n_events: self.events,
            class_balance: self.balance,
            horizon_hours: self.horizon_hours,
            rumour_intensity,
            non_rumour_intensity,
            user_pool: self.users,
            suspicious_fraction: self.suspicious_fraction,
            rumour_affinity: self.rumour_affinity,
            vocab_size: self.vocab_size,
            token_skew: self.token_skew,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub d_v: usize,
    pub epochs: usize,
    pub infer_epochs: usize,
    pub negatives: usize,
    pub noise_power: f64,
    pub text_min_count: usize,
    pub user_min_count: usize,
    pub lr_start: f64,
    pub lr_min: f64,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let d = DbowConfig::text_defaults();
        EmbedSection {
            d_v: d.d_v,
            epochs: d.epochs,
            infer_epochs: d.infer_epochs,
            negatives: d.negatives,
            noise_power: d.noise_power,
            text_min_count: d.min_count,
            user_min_count: DbowConfig::user_defaults().min_count,
            lr_start: d.lr_start,
            lr_min: d.lr_min,
        }
    }
}

impl EmbedSection {
    pub fn text_config(&self) -> DbowConfig {
        DbowConfig {
            d_v: self.d_v,
            epochs: self.epochs,
            infer_epochs: self.infer_epochs,
            negatives: self.negatives,
            min_count: self.text_min_count,
            noise_power: self.noise_power,
            lr_start: self.lr_start,
            lr_min: self.lr_min,
        }
    }

    pub fn user_config(&self) -> DbowConfig {
        DbowConfig {
            min_count: self.user_min_count,
            ..self.text_config()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub d_f: usize,
    pub dense_hidden: usize,
    pub max_hours: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            dropout: d.dropout,
            d_f: d.d_f,
            dense_hidden: d.dense_hidden,
            max_hours: d.max_hours,
            patience: d.patience,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, d_v: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            dropout: self.dropout,
            d_v,
            d_f: self.d_f,
            dense_hidden: self.dense_hidden,
            max_hours: self.max_hours,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub deadlines: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            deadlines: drrd_core::eval::DEFAULT_DEADLINES.to_vec(),
        }
    }
}

impl RunConfig {
    /// Loads the config file when given, otherwise the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, AppError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| AppError::data(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| AppError::usage(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a comma-separated list of non-negative numbers (profiles,
/// deadlines).
pub fn parse_number_list(s: &str) -> Result<Vec<f64>, AppError> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| AppError::usage(format!("'{part}' is not a number")))
        })
        .collect()
}
