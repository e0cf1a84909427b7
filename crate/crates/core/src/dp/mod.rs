//! Pure-DP building blocks for token-level private decoding.
//!
//! Temperature sampling over clipped logits is an instance of the exponential
//! mechanism: with every logit confined to `[b_min, b_max]`, one draw at
//! temperature `T` is `2 (b_max - b_min) / T`-DP. The helpers here convert
//! between the two parameterizations, clip, sample, and keep a running
//! sequential-composition ledger.

mod em;
mod ledger;

pub use em::{clip_logits, em_sample, softmax, EmSampler};
pub use ledger::{Epsilon, LedgerEntry, LedgerError, PrivacyLedger, Stage};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("invalid clip bounds [{b_min}, {b_max}]: need b_min < b_max, both finite")]
    Bounds { b_min: f64, b_max: f64 },
    #[error("logit vector needs at least 2 entries, got {0}")]
    VocabTooSmall(usize),
    #[error("logit at index {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("schedule has {counts} token counts but {temperatures} temperatures")]
    ScheduleLength { counts: usize, temperatures: usize },
    #[error("schedule is empty")]
    EmptySchedule,
}

/// Logit clipping interval. Always satisfies `b_min < b_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds", into = "RawBounds")]
pub struct ClipBounds {
    b_min: f64,
    b_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBounds {
    b_min: f64,
    b_max: f64,
}

impl TryFrom<RawBounds> for ClipBounds {
    type Error = DpError;

    fn try_from(raw: RawBounds) -> Result<Self, Self::Error> {
        ClipBounds::new(raw.b_min, raw.b_max)
    }
}

impl From<ClipBounds> for RawBounds {
    fn from(b: ClipBounds) -> Self {
        RawBounds {
            b_min: b.b_min,
            b_max: b.b_max,
        }
    }
}

impl ClipBounds {
    pub fn new(b_min: f64, b_max: f64) -> Result<Self, DpError> {
        if !b_min.is_finite() || !b_max.is_finite() || b_min >= b_max {
            return Err(DpError::Bounds { b_min, b_max });
        }
        Ok(Self { b_min, b_max })
    }

    /// Bounds `[0, width]`.
    pub fn with_width(width: f64) -> Result<Self, DpError> {
        Self::new(0.0, width)
    }

    pub fn b_min(&self) -> f64 {
        self.b_min
    }

    pub fn b_max(&self) -> f64 {
        self.b_max
    }

    pub fn range(&self) -> f64 {
        self.b_max - self.b_min
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.max(self.b_min).min(self.b_max)
    }
}

/// One decoding step's scores, one per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DpError> {
        if values.len() < 2 {
            return Err(DpError::VocabTooSmall(values.len()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_temperature(temperature: f64) -> Result<(), DpError> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(DpError::Temperature(temperature))
    }
}

/// Per-token privacy loss `2 (b_max - b_min) / T` of one EM draw.
pub fn epsilon_per_token(temperature: f64, bounds: &ClipBounds) -> Result<f64, DpError> {
    check_temperature(temperature)?;
    Ok(2.0 * bounds.range() / temperature)
}

/// Inverse of [`epsilon_per_token`]: `T = 2 (b_max - b_min) / epsilon`.
pub fn temperature_for_epsilon(epsilon_per_token: f64, bounds: &ClipBounds) -> Result<f64, DpError> {
    if !(epsilon_per_token.is_finite() && epsilon_per_token > 0.0) {
        return Err(DpError::Epsilon(epsilon_per_token));
    }
    Ok(2.0 * bounds.range() / epsilon_per_token)
}

/// Total loss of a (possibly non-uniform) rewriting schedule:
/// `sum_i token_counts[i] * epsilon_per_token(temperatures[i])`.
pub fn schedule_total(
    token_counts: &[u64],
    temperatures: &[f64],
    bounds: &ClipBounds,
) -> Result<f64, DpError> {
    if token_counts.len() != temperatures.len() {
        return Err(DpError::ScheduleLength {
            counts: token_counts.len(),
            temperatures: temperatures.len(),
        });
    }
    if token_counts.is_empty() {
        return Err(DpError::EmptySchedule);
    }
    let mut terms = token_counts
        .iter()
        .zip(temperatures)
        .map(|(&n, &t)| epsilon_per_token(t, bounds).map(|e| n as f64 * e))
        .collect::<Result<Vec<_>, _>>()?;
    // sorted summation keeps the total independent of entry order
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum())
}
