//! Labelled synthetic event corpora for desk-scale end-to-end runs.
//!
//! Per-class hourly Poisson intensity profiles give rumours an early spike
//! with faster decay than genuine news; a pool of users containing a
//! suspicious minority with a rumour affinity multiplier makes authorship
//! informative; and post texts are drawn from class-skewed halves of a
//! synthetic vocabulary. Generation is single-threaded with one rng stream,
//! so a (config, seed) pair always yields the same corpus bytes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::corpus::{Event, Label, Post, SECONDS_PER_HOUR};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_events: usize,
    /// Fraction of events labelled rumour.
    pub class_balance: f64,
    pub horizon_hours: usize,
    /// Expected posts per hour for rumours; padded with zeros up to the horizon.
    pub rumour_intensity: Vec<f64>,
    pub non_rumour_intensity: Vec<f64>,
    pub user_pool: usize,
    pub suspicious_fraction: f64,
    /// Multiplier on a suspicious user's selection weight inside rumour events.
    pub rumour_affinity: f64,
    pub vocab_size: usize,
    /// In [0, 1]: probability mass shifted toward a class's own vocabulary half.
    pub token_skew: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let horizon = 24;
        SynthConfig {
            n_events: 400,
            class_balance: 0.5,
            horizon_hours: horizon,
            rumour_intensity: decay_profile(8.0, 0.60, horizon),
            non_rumour_intensity: decay_profile(3.0, 0.78, horizon),
            user_pool: 2000,
            suspicious_fraction: 0.1,
            rumour_affinity: 5.0,
            vocab_size: 200,
            token_skew: 0.35,
            seed: 7,
        }
    }
}

/// Spike-then-decay profile: peak * decay^h for h in 0..horizon.
pub fn decay_profile(peak: f64, decay: f64, horizon: usize) -> Vec<f64> {
    (0..horizon).map(|h| peak * decay.powi(h as i32)).collect()
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.horizon_hours == 0 {
            return Err(SynthError::InvalidConfig("horizon_hours must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(SynthError::InvalidConfig(format!(
                "class_balance must lie in [0, 1], got {}",
                self.class_balance
            )));
        }
        if !(0.0..=1.0).contains(&self.suspicious_fraction) {
            return Err(SynthError::InvalidConfig(format!(
                "suspicious_fraction must lie in [0, 1], got {}",
                self.suspicious_fraction
            )));
        }
        if self.rumour_affinity < 1.0 {
            return Err(SynthError::InvalidConfig(format!(
                "rumour_affinity must be >= 1, got {}",
                self.rumour_affinity
            )));
        }
        if !(0.0..=1.0).contains(&self.token_skew) {
            return Err(SynthError::InvalidConfig(format!(
                "token_skew must lie in [0, 1], got {}",
                self.token_skew
            )));
        }
        if self
            .rumour_intensity
            .iter()
            .chain(&self.non_rumour_intensity)
            .any(|&v| v < 0.0 || !v.is_finite())
        {
            return Err(SynthError::InvalidConfig(
                "intensity profiles must be non-negative and finite".into(),
            ));
        }
        if self.user_pool == 0 || self.vocab_size < 2 {
            return Err(SynthError::InvalidConfig(
                "user_pool must be >= 1 and vocab_size >= 2".into(),
            ));
        }
        Ok(())
    }

    fn intensity(&self, label: Label, hour: usize) -> f64 {
        let profile = match label {
            Label::Rumour => &self.rumour_intensity,
            Label::NonRumour => &self.non_rumour_intensity,
        };
        profile.get(hour).copied().unwrap_or(0.0)
    }

    fn suspicious_count(&self) -> usize {
        (self.user_pool as f64 * self.suspicious_fraction).floor() as usize
    }
}

fn sample_count(intensity: f64, rng: &mut impl Rng) -> usize {
    if intensity <= 0.0 {
        return 0;
    }
    let poisson = Poisson::new(intensity).expect("intensity validated positive");
    poisson.sample(rng) as usize
}

/// Draws an author index; suspicious users (the first `n_susp` indices) get
/// their weight multiplied by the affinity factor inside rumour events.
fn sample_author(config: &SynthConfig, label: Label, rng: &mut impl Rng) -> usize {
    let n_susp = config.suspicious_count();
    let n_normal = config.user_pool - n_susp;
    let weight = if label == Label::Rumour {
        config.rumour_affinity
    } else {
        1.0
    };
    let total = n_susp as f64 * weight + n_normal as f64;
    let r = rng.random_range(0.0..total);
    if r < n_susp as f64 * weight {
        (r / weight) as usize
    } else {
        n_susp + (r - n_susp as f64 * weight) as usize
    }
    .min(config.user_pool - 1)
}

/// Draws one token. Each class favours its own half of the vocabulary with
/// probability 0.5 + skew/2.
fn sample_token(config: &SynthConfig, label: Label, rng: &mut impl Rng) -> String {
    let half = config.vocab_size / 2;
    let own_half_prob = 0.5 + config.token_skew / 2.0;
    let own_first = label == Label::Rumour;
    let use_own: bool = rng.random_bool(own_half_prob);
    let (lo, hi) = if own_first == use_own {
        (0, half)
    } else {
        (half, config.vocab_size)
    };
    format!("w{:03}", rng.random_range(lo..hi))
}

/// Generates one labelled event. Events that draw zero posts are redrawn,
/// so the result always has at least one engagement.
pub fn generate_event(
    event_id: &str,
    label: Label,
    config: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<Event, SynthError> {
    config.validate()?;
    let base_ts: u64 = 1_600_000_000 + rng.random_range(0..30 * 24 * SECONDS_PER_HOUR);
    loop {
        let counts: Vec<usize> = (0..config.horizon_hours)
            .map(|h| sample_count(config.intensity(label, h), rng))
            .collect();
        if counts.iter().sum::<usize>() == 0 {
            continue;
        }

        let mut posts = Vec::new();
        let mut seq = 0usize;
        for (hour, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let offset = rng.random_range(0..SECONDS_PER_HOUR);
                let author = sample_author(config, label, rng);
                let len = rng.random_range(5..=15);
                let text = (0..len)
                    .map(|_| sample_token(config, label, rng))
                    .collect::<Vec<_>>()
                    .join(" ");
                posts.push(Post {
                    post_id: format!("{event_id}-p{seq:04}"),
                    user_id: format!("u{author:05}"),
                    timestamp_s: base_ts + hour as u64 * SECONDS_PER_HOUR + offset,
                    text,
                });
                seq += 1;
            }
        }
        posts.sort_by(|a, b| (a.timestamp_s, &a.post_id).cmp(&(b.timestamp_s, &b.post_id)));
        return Ok(Event {
            event_id: event_id.to_string(),
            label,
            posts,
        });
    }
}

/// Generates the full corpus: exact class counts at the configured balance,
/// label order shuffled, deterministic per seed.
pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<Event>, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_rumours = (config.n_events as f64 * config.class_balance).round() as usize;
    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Rumour, n_rumours)
        .chain(std::iter::repeat_n(
            Label::NonRumour,
            config.n_events - n_rumours,
        ))
        .collect();
    labels.shuffle(&mut rng);

    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_event(&format!("ev{i:05}"), label, config, &mut rng))
        .collect()
}
