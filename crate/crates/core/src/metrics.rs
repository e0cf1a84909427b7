//! Sentence-level ROUGE-1, ROUGE-L and BLEU-4 over case-folded,
//! punctuation-stripped whitespace tokens.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::keywords::tokenize_for_metrics;

pub const MAX_BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "bleu")]
    Bleu,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricDetails {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ngram_precisions: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brevity_penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub value: f64,
    pub metric: Metric,
    pub details: MetricDetails,
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision == 0.0 || recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn counts<T: Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap<T: Hash + Eq>(reference: &HashMap<T, usize>, hypothesis: &HashMap<T, usize>) -> usize {
    hypothesis
        .iter()
        .map(|(k, &c)| c.min(reference.get(k).copied().unwrap_or(0)))
        .sum()
}

fn prf(matches: usize, ref_len: usize, hyp_len: usize, metric: Metric) -> MetricScore {
    let precision = if hyp_len == 0 { 0.0 } else { matches as f64 / hyp_len as f64 };
    let recall = if ref_len == 0 { 0.0 } else { matches as f64 / ref_len as f64 };
    let f = f1(precision, recall);
    MetricScore {
        value: f,
        metric,
        details: MetricDetails {
            precision,
            recall,
            f1: f,
            ..Default::default()
        },
    }
}

pub fn rouge1_tokens(reference: &[String], hypothesis: &[String]) -> MetricScore {
    let matches = clipped_overlap(&counts(reference), &counts(hypothesis));
    prf(matches, reference.len(), hypothesis.len(), Metric::Rouge1)
}

pub fn rouge1(reference: &str, hypothesis: &str) -> MetricScore {
    rouge1_tokens(&tokenize_for_metrics(reference), &tokenize_for_metrics(hypothesis))
}

/// Longest common subsequence length, O(n m) time, O(m) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_tokens(reference: &[String], hypothesis: &[String]) -> MetricScore {
    let l = lcs_len(reference, hypothesis);
    prf(l, reference.len(), hypothesis.len(), Metric::RougeL)
}

pub fn rouge_l(reference: &str, hypothesis: &str) -> MetricScore {
    rouge_l_tokens(&tokenize_for_metrics(reference), &tokenize_for_metrics(hypothesis))
}

/// Sentence BLEU with uniform weights over orders `1..=min(4, |hyp|)`.
/// A zero modified precision is replaced by `1 / (2 * hypothesis n-grams)`.
pub fn bleu_tokens(reference: &[String], hypothesis: &[String]) -> MetricScore {
    if reference.is_empty() || hypothesis.is_empty() {
        return MetricScore {
            value: 0.0,
            metric: Metric::Bleu,
            details: MetricDetails::default(),
        };
    }
    let orders = hypothesis.len().min(MAX_BLEU_ORDER);
    let precisions: Vec<f64> = (1..=orders)
        .map(|n| {
            let hyp = counts(hypothesis.windows(n));
            let refc = counts(reference.windows(n));
            let total = hypothesis.len() + 1 - n;
            let matched = clipped_overlap(&refc, &hyp);
            if matched == 0 {
                1.0 / (2.0 * total as f64)
            } else {
                matched as f64 / total as f64
            }
        })
        .collect();
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / orders as f64;
    let (r, h) = (reference.len() as f64, hypothesis.len() as f64);
    let bp = if h < r { (1.0 - r / h).exp() } else { 1.0 };
    let value = bp * log_mean.exp();
    MetricScore {
        value,
        metric: Metric::Bleu,
        details: MetricDetails {
            ngram_precisions: precisions,
            brevity_penalty: Some(bp),
            ..Default::default()
        },
    }
}

pub fn bleu(reference: &str, hypothesis: &str) -> MetricScore {
    bleu_tokens(&tokenize_for_metrics(reference), &tokenize_for_metrics(hypothesis))
}

/// All three scores for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
}

pub fn similarity(reference: &str, hypothesis: &str) -> SimilarityScores {
    let r = tokenize_for_metrics(reference);
    let h = tokenize_for_metrics(hypothesis);
    SimilarityScores {
        rouge1: rouge1_tokens(&r, &h).value,
        rouge_l: rouge_l_tokens(&r, &h).value,
        bleu: bleu_tokens(&r, &h).value,
    }
}
