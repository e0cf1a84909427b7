use serde::{Deserialize, Serialize};

use super::stopwords;

/// Record of the normalization applied to produce a token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub case_fold: bool,
    pub strip_punctuation: bool,
    /// Stop-word list id, or `None` when stop words are kept.
    pub stop_words: Option<String>,
}

impl Normalization {
    /// Keyword extraction: case-folded, punctuation-stripped, English stop words removed.
    pub fn keywords() -> Self {
        Self {
            case_fold: true,
            strip_punctuation: true,
            stop_words: Some(stopwords::ENGLISH_V1_ID.to_string()),
        }
    }

    /// Similarity metrics: the same pipeline with stop words kept.
    pub fn metrics() -> Self {
        Self {
            stop_words: None,
            ..Self::keywords()
        }
    }

    pub fn apply(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .filter_map(|raw| {
                let trimmed = if self.strip_punctuation {
                    raw.trim_matches(|c: char| !c.is_alphanumeric())
                } else {
                    raw
                };
                if trimmed.is_empty() {
                    return None;
                }
                let token = if self.case_fold {
                    trimmed.to_lowercase()
                } else {
                    trimmed.to_string()
                };
                if self.stop_words.is_some() && stopwords::is_english_stop_word(&token) {
                    return None;
                }
                Some(token)
            })
            .collect()
    }
}

/// Whitespace split, edge punctuation stripped, lowercased, stop words dropped.
pub fn tokenize_normalize(text: &str) -> Vec<String> {
    Normalization::keywords().apply(text)
}

/// Metric tokenization: as [`tokenize_normalize`] but stop words are kept.
pub fn tokenize_for_metrics(text: &str) -> Vec<String> {
    Normalization::metrics().apply(text)
}
