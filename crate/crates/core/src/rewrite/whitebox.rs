use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::{RewriteError, RewriteMode, RewriteParams, RewriteRecord};
use crate::dp::{clip_logits, em_sample, epsilon_per_token, ClipBounds, Epsilon, LedgerEntry, LogitVector, PrivacyLedger, Stage};

/// Whitespace-token vocabulary with a distinguished end-of-sequence entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    eos: usize,
}

impl Vocabulary {
    /// `words` must be distinct and whitespace-free; `eos` is appended if absent.
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>, eos: &str) -> Result<Self, RewriteError> {
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for w in words.into_iter().map(Into::into).chain(std::iter::once(eos.to_string())) {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(RewriteError::Params(format!("invalid vocabulary token {w:?}")));
            }
            if index.contains_key(&w) {
                if w == eos {
                    continue;
                }
                return Err(RewriteError::Params(format!("duplicate vocabulary token {w:?}")));
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        if tokens.len() < 2 {
            return Err(RewriteError::Params("vocabulary needs a token besides EOS".into()));
        }
        let eos = index[eos];
        Ok(Self { tokens, index, eos })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }
}

/// Next-token logits for a running context.
pub trait StepOracle: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Raw (unclipped) logits over [`StepOracle::vocabulary`], given the
    /// instruction tokens followed by the tokens generated so far.
    fn next_logits(&self, context: &[String]) -> Result<LogitVector, String>;
}

pub struct WhiteBoxEngine {
    pub oracle: Arc<dyn StepOracle>,
    pub bounds: ClipBounds,
}

/// Decode one paraphrase: clip, sample, append, until EOS or `max_tokens`.
///
/// Every draw, including one that selects EOS, is charged. On provider
/// failure the draws already made are still charged.
pub fn paraphrase_whitebox<R: Rng + ?Sized>(
    prompt: &str,
    params: &RewriteParams,
    engine: &WhiteBoxEngine,
    rng: &mut R,
    ledger: &mut PrivacyLedger,
) -> Result<RewriteRecord, RewriteError> {
    if params.mode != RewriteMode::Whitebox {
        return Err(RewriteError::Params("expected whitebox parameters".into()));
    }
    params.validate()?;
    let bounds = params.bounds.unwrap_or(engine.bounds);
    let eps = epsilon_per_token(params.temperature, &bounds)?;
    let vocab = engine.oracle.vocabulary();

    let mut context: Vec<String> = params
        .render_instruction(prompt)
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let mut output: Vec<String> = Vec::new();
    let mut draws = 0u64;

    let outcome = (|| {
        for _ in 0..params.max_tokens {
            let raw = engine
                .oracle
                .next_logits(&context)
                .map_err(|message| (message, draws))?;
            if raw.vocab_size() != vocab.len() {
                return Err((
                    format!("provider returned {} logits for a vocabulary of {}", raw.vocab_size(), vocab.len()),
                    draws,
                ));
            }
            let clipped = clip_logits(&raw, &bounds);
            let idx = em_sample(&clipped, params.temperature, rng).map_err(|e| (e.to_string(), draws))?;
            draws += 1;
            if idx == vocab.eos() {
                break;
            }
            let tok = vocab.token(idx).to_string();
            context.push(tok.clone());
            output.push(tok);
        }
        Ok(())
    })();

    if draws > 0 {
        ledger.append(
            LedgerEntry::new(Stage::Rewrite, "em_decode", Epsilon::Finite(eps), draws)
                .with_temperature(params.temperature),
        )?;
    }
    if let Err((message, tokens_emitted)) = outcome {
        return Err(RewriteError::Provider { message, tokens_emitted });
    }
    Ok(RewriteRecord {
        slot: 0,
        text: output.join(" "),
        temperature: params.temperature,
        epsilon_per_token: eps,
        tokens: draws,
        mode: RewriteMode::Whitebox,
        nominal: false,
        attempts: 1,
    })
}
