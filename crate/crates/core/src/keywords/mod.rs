//! Consensus keyword extraction over a paraphrase group.
//!
//! Words that survive many independent paraphrases are treated as leakage
//! signals. The group histogram is released either as a plain top-K (pure
//! post-processing of the already private group) or through an epsilon-DP
//! top-K selection that is charged separately.

mod normalize;
pub mod stopwords;

pub use normalize::{tokenize_for_metrics, tokenize_normalize, Normalization};

use std::cmp::Reverse;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{Epsilon, LedgerEntry, LedgerError, PrivacyLedger, Stage};
use crate::rewrite::ParaphraseGroup;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeywordError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("requested {k} keywords but the histogram has only {distinct} distinct words")]
    NotEnoughWords { k: usize, distinct: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("the joint top-K mechanism is not available in this build; use the peel strategy")]
    JointUnavailable,
    #[error("invalid histogram key {0:?}: keys must be single normalized non-stop-word tokens")]
    InvalidKey(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Word counts accumulated over every rewrite in a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordHistogram {
    counts: BTreeMap<String, u64>,
    total_words: u64,
    normalization: Normalization,
}

impl KeywordHistogram {
    /// Every occurrence in every text is counted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let normalization = Normalization::keywords();
        let mut counts = BTreeMap::new();
        let mut total_words = 0;
        for text in texts {
            for word in normalization.apply(text) {
                *counts.entry(word).or_insert(0) += 1;
                total_words += 1;
            }
        }
        Self {
            counts,
            total_words,
            normalization,
        }
    }

    /// Build from explicit counts. Zero counts are kept as candidates.
    pub fn from_counts<S: Into<String>>(
        counts: impl IntoIterator<Item = (S, u64)>,
    ) -> Result<Self, KeywordError> {
        let normalization = Normalization::keywords();
        let mut map = BTreeMap::new();
        for (word, c) in counts {
            let word = word.into();
            if normalization.apply(&word) != [word.clone()] {
                return Err(KeywordError::InvalidKey(word));
            }
            *map.entry(word).or_insert(0) += c;
        }
        let total_words = map.values().sum();
        Ok(Self {
            counts: map,
            total_words,
            normalization,
        })
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn total_words(&self) -> u64 {
        self.total_words
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }
}

/// Histogram over all rewrites of the group. The source prompt is not counted.
pub fn build_histogram(group: &ParaphraseGroup) -> KeywordHistogram {
    KeywordHistogram::from_texts(group.rewrites.iter().map(|r| r.text.as_str()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ReleaseMethod {
    Ndp,
    Dp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKStrategy {
    /// K sequential exponential-mechanism draws without replacement, each at epsilon / K.
    #[default]
    Peel,
    /// One-shot joint selection. Not bundled.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleasedKeywords {
    pub words: Vec<String>,
    pub method: ReleaseMethod,
    pub epsilon: Epsilon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl ReleasedKeywords {
    /// The ledger record this release costs.
    pub fn ledger_entry(&self) -> LedgerEntry {
        match (self.method, self.epsilon) {
            (ReleaseMethod::Dp, Epsilon::Finite(e)) => {
                LedgerEntry::new(Stage::KeywordRelease, "topk_peel", Epsilon::Finite(e), 1)
                    .with_note(format!("K={}", self.words.len()))
            }
            _ => LedgerEntry::post_process("topk_ndp").with_note(format!("K={}", self.words.len())),
        }
    }
}

/// Deterministic top-K: descending count, ties by ascending word.
pub fn topk_ndp(hist: &KeywordHistogram, k: usize) -> Result<ReleasedKeywords, KeywordError> {
    if k == 0 {
        return Err(KeywordError::ZeroK);
    }
    let mut ranked: Vec<(&String, u64)> = hist.counts.iter().map(|(w, &c)| (w, c)).collect();
    ranked.sort_by_key(|&(w, c)| (Reverse(c), w));
    let words: Vec<String> = ranked.into_iter().take(k).map(|(w, _)| w.clone()).collect();
    let warning = hist
        .is_empty()
        .then(|| "histogram is empty; no keywords released".to_string());
    Ok(ReleasedKeywords {
        words,
        method: ReleaseMethod::Ndp,
        epsilon: Epsilon::Infinite,
        seed: None,
        warning,
    })
}

/// One peel step: probability of picking each remaining candidate when the
/// step runs at `eps_step` with count sensitivity 1.
pub fn peel_step_probabilities(counts: &[u64], eps_step: f64) -> Vec<f64> {
    let scores: Vec<f64> = counts.iter().map(|&c| eps_step * c as f64 / 2.0).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Exact probability that the peel mechanism outputs `sequence` (in order).
pub fn peel_sequence_probability(
    hist: &KeywordHistogram,
    sequence: &[&str],
    epsilon: f64,
) -> Result<f64, KeywordError> {
    let k = sequence.len();
    check_dp_args(hist, k, epsilon)?;
    let eps_step = epsilon / k as f64;
    let mut remaining: Vec<(&str, u64)> = hist.counts.iter().map(|(w, &c)| (w.as_str(), c)).collect();
    let mut prob = 1.0;
    for word in sequence {
        let Some(pos) = remaining.iter().position(|(w, _)| w == word) else {
            return Ok(0.0);
        };
        let counts: Vec<u64> = remaining.iter().map(|&(_, c)| c).collect();
        prob *= peel_step_probabilities(&counts, eps_step)[pos];
        remaining.remove(pos);
    }
    Ok(prob)
}

fn check_dp_args(hist: &KeywordHistogram, k: usize, epsilon: f64) -> Result<(), KeywordError> {
    if k == 0 {
        return Err(KeywordError::ZeroK);
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(KeywordError::Epsilon(epsilon));
    }
    if k > hist.distinct() {
        return Err(KeywordError::NotEnoughWords {
            k,
            distinct: hist.distinct(),
        });
    }
    Ok(())
}

/// Epsilon-DP top-K release (utility = count, sensitivity 1).
///
/// Candidates are the histogram's key set, so the domain itself comes from
/// the rewrites and is not protected by the mechanism.
pub fn topk_dp<R: Rng + ?Sized>(
    hist: &KeywordHistogram,
    k: usize,
    epsilon: f64,
    strategy: TopKStrategy,
    rng: &mut R,
) -> Result<ReleasedKeywords, KeywordError> {
    check_dp_args(hist, k, epsilon)?;
    if strategy == TopKStrategy::Joint {
        return Err(KeywordError::JointUnavailable);
    }
    let eps_step = epsilon / k as f64;
    let mut remaining: Vec<(&String, u64)> = hist.counts.iter().map(|(w, &c)| (w, c)).collect();
    let mut words = Vec::with_capacity(k);
    for _ in 0..k {
        let counts: Vec<u64> = remaining.iter().map(|&(_, c)| c).collect();
        let probs = peel_step_probabilities(&counts, eps_step);
        let target: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if target < acc {
                pick = i;
                break;
            }
        }
        words.push(remaining.remove(pick).0.clone());
    }
    Ok(ReleasedKeywords {
        words,
        method: ReleaseMethod::Dp,
        epsilon: Epsilon::Finite(epsilon),
        seed: None,
        warning: None,
    })
}

/// How the pipeline releases keywords.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeywordRelease {
    Ndp,
    Dp { epsilon: f64, strategy: TopKStrategy },
}

/// Release per `mode` and charge `ledger` accordingly.
pub fn release<R: Rng + ?Sized>(
    hist: &KeywordHistogram,
    k: usize,
    mode: KeywordRelease,
    rng: &mut R,
    ledger: &mut PrivacyLedger,
) -> Result<ReleasedKeywords, KeywordError> {
    let released = match mode {
        KeywordRelease::Ndp => topk_ndp(hist, k)?,
        KeywordRelease::Dp { epsilon, strategy } => topk_dp(hist, k, epsilon, strategy, rng)?,
    };
    ledger.append(released.ledger_entry())?;
    Ok(released)
}
