//! Final prompt assembly and regeneration.
//!
//! The rendered prompt carries only the chosen exemplar and the released
//! keywords; it never sees the source text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{LedgerEntry, LedgerError, PrivacyLedger};
use crate::keywords::tokenize_normalize;
use crate::llm::{ChatRequest, ChatService, LlmError};

pub const EXEMPLAR_HEADER: &str = "Refer to the following question to generate a new question:";
pub const AVOID_HEADER: &str = "Avoid using the following tokens:";
pub const DEFAULT_TEMPLATE_ID: &str = "refer-avoid-v1";

/// Temperatures above this are accepted but logged.
pub const ADVISORY_MAX_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("exemplar is empty")]
    EmptyExemplar,
    #[error("exemplar must be a single line")]
    MultilineExemplar,
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("final generation failed: {0}")]
    Generation(#[from] LlmError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPromptRequest {
    pub exemplar: String,
    forbidden: Vec<String>,
    pub template_id: String,
    pub temperature: f64,
}

impl FinalPromptRequest {
    /// Forbidden words are deduplicated keeping first occurrence.
    pub fn new(exemplar: impl Into<String>, forbidden: impl IntoIterator<Item = String>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let forbidden = forbidden.into_iter().filter(|w| seen.insert(w.clone())).collect();
        Self {
            exemplar: exemplar.into(),
            forbidden,
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
            temperature: 0.0,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn forbidden(&self) -> &[String] {
        &self.forbidden
    }
}

/// Four lines joined by `\n`: exemplar header, exemplar, avoid header,
/// keywords joined by `", "` in release order.
pub fn render_template(req: &FinalPromptRequest) -> Result<String, PromptError> {
    if req.template_id != DEFAULT_TEMPLATE_ID {
        return Err(PromptError::UnknownTemplate(req.template_id.clone()));
    }
    if req.exemplar.trim().is_empty() {
        return Err(PromptError::EmptyExemplar);
    }
    if req.exemplar.contains('\n') {
        return Err(PromptError::MultilineExemplar);
    }
    Ok([
        EXEMPLAR_HEADER,
        req.exemplar.as_str(),
        AVOID_HEADER,
        req.forbidden.join(", ").as_str(),
    ]
    .join("\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub model: String,
    pub system_prompt: Option<String>,
    pub max_tokens: u32,
    /// Extra generations attempted while the output still contains a
    /// forbidden word. Capped at 2.
    pub max_regenerations: u32,
    /// On service failure, emit the exemplar itself instead of erroring.
    pub fallback_to_exemplar: bool,
    pub seed: Option<u64>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            model: String::new(),
            system_prompt: None,
            max_tokens: 128,
            max_regenerations: 0,
            fallback_to_exemplar: false,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizedOutput {
    pub final_prompt: String,
    pub sanitized: String,
    pub leakage_flag: bool,
    pub leaked_words: Vec<String>,
    pub regenerations: u32,
    pub fell_back: bool,
}

/// Forbidden words present in `text` after keyword normalization.
pub fn leaked_words(text: &str, forbidden: &[String]) -> Vec<String> {
    let tokens: std::collections::HashSet<String> = tokenize_normalize(text).into_iter().collect();
    forbidden.iter().filter(|w| tokens.contains(*w)).cloned().collect()
}

/// Ask `client` for the final question. Charges one zero-cost
/// post-processing entry to `ledger`.
pub fn generate_sanitized(
    req: &FinalPromptRequest,
    client: &dyn ChatService,
    options: &GenerationOptions,
    ledger: &mut PrivacyLedger,
) -> Result<SanitizedOutput, PromptError> {
    let final_prompt = render_template(req)?;
    if req.temperature > ADVISORY_MAX_TEMPERATURE {
        log::warn!(
            "final generation temperature {} exceeds advisory ceiling {}",
            req.temperature,
            ADVISORY_MAX_TEMPERATURE
        );
    }
    let mut chat = ChatRequest::single(
        options.model.clone(),
        options.system_prompt.as_deref(),
        final_prompt.clone(),
        req.temperature,
        options.max_tokens,
    );
    let max_regen = options.max_regenerations.min(2);
    let mut regenerations = 0;
    let outcome = loop {
        if let Some(seed) = options.seed {
            chat.seed = Some(seed.wrapping_add(regenerations as u64));
        }
        match client.complete(&chat) {
            Ok(resp) => {
                let leaked = leaked_words(&resp.text, req.forbidden());
                if leaked.is_empty() || regenerations >= max_regen {
                    break Ok((resp.text, leaked));
                }
                regenerations += 1;
            }
            Err(e) => break Err(e),
        }
    };
    let (sanitized, leaked, fell_back) = match outcome {
        Ok((text, leaked)) => (text, leaked, false),
        Err(e) if options.fallback_to_exemplar => {
            log::warn!("final generation failed ({e}); emitting exemplar");
            let leaked = leaked_words(&req.exemplar, req.forbidden());
            (req.exemplar.clone(), leaked, true)
        }
        Err(e) => return Err(e.into()),
    };
    ledger.append(LedgerEntry::post_process("final_generation").with_temperature(req.temperature))?;
    Ok(SanitizedOutput {
        final_prompt,
        sanitized,
        leakage_flag: !leaked.is_empty(),
        leaked_words: leaked,
        regenerations,
        fell_back,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatResponse, FnService};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn renders_four_lines() {
        let req = FinalPromptRequest::new("Where is X?", words(&["x", "y"]));
        let out = render_template(&req).unwrap();
        assert_eq!(
            out,
            "Refer to the following question to generate a new question:\nWhere is X?\nAvoid using the following tokens:\nx, y"
        );
    }

    #[test]
    fn empty_forbidden_renders_empty_line() {
        let out = render_template(&FinalPromptRequest::new("Q?", vec![])).unwrap();
        assert!(out.ends_with("tokens:\n"));
        assert_eq!(out.split('\n').count(), 4);
    }

    #[test]
    fn dedups_and_rejects() {
        let req = FinalPromptRequest::new("Q", words(&["a1", "b1", "a1"]));
        assert_eq!(req.forbidden(), &["a1", "b1"]);
        assert_eq!(render_template(&FinalPromptRequest::new("  ", vec![])), Err(PromptError::EmptyExemplar));
        assert_eq!(
            render_template(&FinalPromptRequest::new("a\nb", vec![])),
            Err(PromptError::MultilineExemplar)
        );
    }

    fn exemplar_of(req: &ChatRequest) -> String {
        req.last_user().split('\n').nth(1).unwrap().to_string()
    }

    #[test]
    fn leakage_flag_follows_output() {
        let req = FinalPromptRequest::new("Where is Zurich located?", words(&["zurich"]));
        let deleting = FnService(|r: &ChatRequest| {
            Ok(ChatResponse::from_text(exemplar_of(r).replace("Zurich ", "")))
        });
        let echo = FnService(|r: &ChatRequest| Ok(ChatResponse::from_text(exemplar_of(r))));
        let mut ledger = PrivacyLedger::new();
        let out = generate_sanitized(&req, &deleting, &GenerationOptions::default(), &mut ledger).unwrap();
        assert!(!out.leakage_flag);
        assert_eq!(out.sanitized, "Where is located?");
        let out = generate_sanitized(&req, &echo, &GenerationOptions::default(), &mut ledger).unwrap();
        assert!(out.leakage_flag);
        assert_eq!(out.leaked_words, vec!["zurich"]);
        assert_eq!(ledger.total(), 0.0);
        assert_eq!(ledger.len(), 2);
    }

    #[test]
    fn bounded_regeneration() {
        let calls = AtomicU32::new(0);
        let echo = FnService(|r: &ChatRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(ChatResponse::from_text(exemplar_of(r)))
        });
        let req = FinalPromptRequest::new("Zurich?", words(&["zurich"]));
        let opts = GenerationOptions {
            max_regenerations: 5,
            ..Default::default()
        };
        let out = generate_sanitized(&req, &echo, &opts, &mut PrivacyLedger::new()).unwrap();
        assert_eq!(out.regenerations, 2);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert!(out.leakage_flag);
    }

    #[test]
    fn failure_and_fallback() {
        let failing = FnService(|_: &ChatRequest| {
            Err(LlmError::Service {
                message: "down".into(),
                retryable: false,
            })
        });
        let req = FinalPromptRequest::new("Zurich?", words(&["zurich"]));
        let mut ledger = PrivacyLedger::new();
        assert!(matches!(
            generate_sanitized(&req, &failing, &GenerationOptions::default(), &mut ledger),
            Err(PromptError::Generation(_))
        ));
        assert!(ledger.is_empty());
        let opts = GenerationOptions {
            fallback_to_exemplar: true,
            ..Default::default()
        };
        let out = generate_sanitized(&req, &failing, &opts, &mut ledger).unwrap();
        assert!(out.fell_back);
        assert_eq!(out.sanitized, "Zurich?");
        assert!(out.leakage_flag);
    }
}
