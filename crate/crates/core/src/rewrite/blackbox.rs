use std::sync::Arc;

use super::{RewriteError, RewriteMode, RewriteParams, RewriteRecord};
use crate::dp::{epsilon_per_token, ClipBounds, Epsilon, LedgerEntry, PrivacyLedger, Stage};
use crate::llm::{ChatRequest, ChatService, RetryPolicy};

pub const DEFAULT_PARAPHRASE_TEMPLATE: &str =
    "Paraphrase the following question. Output only the paraphrase:\n{prompt}";

/// Remote decoding through a chat-completion service. The service cannot be
/// made to clip, so epsilon is computed from `nominal_bounds` and ledger
/// entries are flagged nominal.
pub struct BlackBoxEngine {
    pub client: Arc<dyn ChatService>,
    pub model: String,
    pub nominal_bounds: ClipBounds,
    pub retry: RetryPolicy,
    pub system_prompt: Option<String>,
}

impl BlackBoxEngine {
    pub fn new(client: Arc<dyn ChatService>, model: impl Into<String>, nominal_bounds: ClipBounds) -> Self {
        Self {
            client,
            model: model.into(),
            nominal_bounds,
            retry: RetryPolicy::default(),
            system_prompt: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

/// One paraphrase from the remote service at `params.temperature`.
///
/// Charged units are the reported completion tokens, or `max_tokens` when
/// the service does not report usage.
pub fn paraphrase_blackbox(
    prompt: &str,
    params: &RewriteParams,
    engine: &BlackBoxEngine,
    seed: u64,
    ledger: &mut PrivacyLedger,
) -> Result<RewriteRecord, RewriteError> {
    if params.mode != RewriteMode::Blackbox {
        return Err(RewriteError::Params("expected blackbox parameters".into()));
    }
    params.validate()?;
    let bounds = params.bounds.unwrap_or(engine.nominal_bounds);
    let eps = epsilon_per_token(params.temperature, &bounds)?;
    let req = ChatRequest::single(
        engine.model.clone(),
        engine.system_prompt.as_deref(),
        params.render_instruction(prompt),
        params.temperature,
        params.max_tokens,
    )
    .with_seed(seed);

    let mut outer_attempts = 0;
    let (resp, attempts) = engine
        .retry
        .run(|_| {
            outer_attempts += 1;
            engine.client.complete(&req)
        })
        .map_err(|source| RewriteError::Service {
            source,
            attempts: outer_attempts,
        })?;
    let attempts = attempts - 1 + resp.attempts.max(1);

    let units = if resp.usage_reported {
        resp.tokens_generated.max(1)
    } else {
        params.max_tokens as u64
    };
    if units > params.max_tokens as u64 {
        return Err(RewriteError::TokenOverrun {
            reported: units,
            max_tokens: params.max_tokens,
        });
    }
    ledger.append(
        LedgerEntry::new(Stage::Rewrite, "remote_sampling", Epsilon::Finite(eps), units)
            .with_temperature(params.temperature)
            .nominal(true),
    )?;
    Ok(RewriteRecord {
        slot: 0,
        text: resp.text.trim().to_string(),
        temperature: params.temperature,
        epsilon_per_token: eps,
        tokens: units,
        mode: RewriteMode::Blackbox,
        nominal: true,
        attempts,
    })
}
