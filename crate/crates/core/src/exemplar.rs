//! Lowest-perplexity exemplar selection over a paraphrase group.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{LedgerEntry, LedgerError, PrivacyLedger};
use crate::keywords::tokenize_for_metrics;
use crate::rewrite::ParaphraseGroup;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExemplarError {
    #[error("cannot score text with no tokens")]
    EmptyText,
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("no rewrite in the group could be scored")]
    NothingScorable,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Perplexity oracle. Lower is better; scores must be totally ordered.
pub trait PerplexityScorer: Send + Sync {
    fn score(&self, text: &str) -> Result<f64, ExemplarError>;
}

/// Add-one smoothed unigram model fit on the paraphrase group itself.
///
/// `p(w) = (count(w) + 1) / (N + V)` with `N` the group's token count and
/// `V` its vocabulary size; unseen tokens get `1 / (N + V)`.
#[derive(Debug, Clone)]
pub struct UnigramScorer {
    counts: HashMap<String, u64>,
    total: u64,
}

impl UnigramScorer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = HashMap::new();
        let mut total = 0;
        for t in texts {
            for tok in tokenize_for_metrics(t) {
                *counts.entry(tok).or_insert(0) += 1;
                total += 1;
            }
        }
        Self { counts, total }
    }

    pub fn for_group(group: &ParaphraseGroup) -> Self {
        Self::fit(group.texts())
    }

    fn log_prob(&self, token: &str) -> f64 {
        let denom = (self.total + self.counts.len() as u64).max(1) as f64;
        let num = self.counts.get(token).copied().unwrap_or(0) as f64 + 1.0;
        (num / denom).ln()
    }
}

impl PerplexityScorer for UnigramScorer {
    fn score(&self, text: &str) -> Result<f64, ExemplarError> {
        let tokens = tokenize_for_metrics(text);
        if tokens.is_empty() {
            return Err(ExemplarError::EmptyText);
        }
        let mean = tokens.iter().map(|t| self.log_prob(t)).sum::<f64>() / tokens.len() as f64;
        Ok((-mean).exp())
    }
}

/// Per-token log-probabilities of a text under some language model.
pub trait TokenLogprobSource: Send + Sync {
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, String>;
}

/// Perplexity from model log-probabilities: `exp(-mean logprob)`.
pub struct LogprobScorer<S>(pub S);

impl<S: TokenLogprobSource> PerplexityScorer for LogprobScorer<S> {
    fn score(&self, text: &str) -> Result<f64, ExemplarError> {
        let lps = self.0.token_logprobs(text).map_err(ExemplarError::Scorer)?;
        if lps.is_empty() {
            return Err(ExemplarError::EmptyText);
        }
        if lps.iter().any(|x| !x.is_finite()) {
            return Err(ExemplarError::Scorer("non-finite log-probability".into()));
        }
        Ok((-lps.iter().sum::<f64>() / lps.len() as f64).exp())
    }
}

pub fn score_perplexity(text: &str, scorer: &dyn PerplexityScorer) -> Result<f64, ExemplarError> {
    scorer.score(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredParaphrase {
    /// Position in the group's rewrite list.
    pub index: usize,
    pub text: String,
    pub perplexity: f64,
}

/// Index of the smallest score, first one on ties. `None` entries are skipped.
pub fn argmin(scores: &[Option<f64>]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, v)))
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Pick the lowest-perplexity rewrite. Charges a zero-cost post-processing entry.
pub fn select_exemplar(
    group: &ParaphraseGroup,
    scorer: &dyn PerplexityScorer,
    ledger: &mut PrivacyLedger,
) -> Result<ScoredParaphrase, ExemplarError> {
    let scores: Vec<Option<f64>> = group
        .rewrites
        .par_iter()
        .map(|r| match scorer.score(&r.text) {
            Ok(s) if s.is_finite() => Some(s),
            Ok(_) => None,
            Err(e) => {
                log::debug!("rewrite not scorable: {e}");
                None
            }
        })
        .collect();
    let index = argmin(&scores).ok_or(ExemplarError::NothingScorable)?;
    ledger.append(LedgerEntry::post_process("min_perplexity_exemplar"))?;
    Ok(ScoredParaphrase {
        index,
        text: group.rewrites[index].text.clone(),
        perplexity: scores[index].expect("argmin returns a scored index"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_token_model() {
        let s = UnigramScorer::fit(["a b", "a b"]);
        assert!((s.score("a b").unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn certainty_case() {
        let s = UnigramScorer::fit(["zz zz zz"]);
        assert!((s.score("zz zz").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_errors() {
        let s = UnigramScorer::fit(["a"]);
        assert_eq!(s.score("  ?! "), Err(ExemplarError::EmptyText));
    }

    #[test]
    fn unseen_tokens_raise_perplexity() {
        let s = UnigramScorer::fit(["red car", "red bike"]);
        assert!(s.score("blue boat").unwrap() > s.score("red car").unwrap());
        assert!(s.score("blue boat").unwrap() >= 1.0);
    }

    #[test]
    fn argmin_rules() {
        assert_eq!(argmin(&[Some(3.2), Some(1.1), Some(7.0)]), Some(1));
        assert_eq!(argmin(&[Some(2.0), Some(2.0)]), Some(0));
        assert_eq!(argmin(&[None, Some(5.0), Some(5.0)]), Some(1));
        assert_eq!(argmin(&[None, None]), None);
    }

    struct Fixed(Vec<f64>);

    impl TokenLogprobSource for Fixed {
        fn token_logprobs(&self, _: &str) -> Result<Vec<f64>, String> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn logprob_scorer() {
        let s = LogprobScorer(Fixed(vec![0.5f64.ln(), 0.5f64.ln()]));
        assert!((s.score("x").unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(LogprobScorer(Fixed(vec![])).score("x"), Err(ExemplarError::EmptyText));
    }
}
