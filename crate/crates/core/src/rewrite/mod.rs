//! Group rewriting: `m` independent private paraphrases of one prompt.
//!
//! Each rewrite conditions only on the source prompt and draws from its own
//! random stream (root seed, slot index), so the group is reproducible and
//! the slots can run in parallel. Ledger entries are merged in schedule
//! order after all slots finish.

mod blackbox;
mod calibrate;
mod whitebox;

pub use blackbox::{paraphrase_blackbox, BlackBoxEngine, DEFAULT_PARAPHRASE_TEMPLATE};
pub use calibrate::{calibrate_bounds, CalibrationError, CalibrationStats};
pub use whitebox::{paraphrase_whitebox, StepOracle, Vocabulary, WhiteBoxEngine};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{epsilon_per_token, ClipBounds, DpError, LedgerError, PrivacyLedger};
use crate::llm::LlmError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewriteError {
    #[error("invalid rewrite parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("logit provider failed after {tokens_emitted} tokens: {message}")]
    Provider { message: String, tokens_emitted: u64 },
    #[error("completion service failed after {attempts} attempts: {source}")]
    Service { source: LlmError, attempts: u32 },
    #[error("service produced {reported} tokens, above max_tokens {max_tokens}")]
    TokenOverrun { reported: u64, max_tokens: u32 },
    #[error("all {0} rewrites failed")]
    AllFailed(usize),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewriteMode {
    Whitebox,
    Blackbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteParams {
    pub mode: RewriteMode,
    pub temperature: f64,
    #[serde(default)]
    pub epsilon_per_token: Option<f64>,
    pub max_tokens: u32,
    pub prompt_template: String,
    #[serde(default)]
    pub bounds: Option<ClipBounds>,
}

impl RewriteParams {
    pub fn validate(&self) -> Result<(), RewriteError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(RewriteError::Params(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(RewriteError::Params("max_tokens must be positive".into()));
        }
        if self.mode == RewriteMode::Whitebox && self.bounds.is_none() {
            return Err(RewriteError::Params("whitebox mode requires clip bounds".into()));
        }
        if let (Some(eps), Some(bounds)) = (self.epsilon_per_token, self.bounds) {
            let implied = epsilon_per_token(self.temperature, &bounds)?;
            if (implied - eps).abs() > 1e-9 * implied.max(1.0) {
                return Err(RewriteError::Params(format!(
                    "epsilon_per_token {eps} disagrees with temperature {} (implies {implied})",
                    self.temperature
                )));
            }
        }
        Ok(())
    }

    fn render_instruction(&self, prompt: &str) -> String {
        self.prompt_template.replace("{prompt}", prompt)
    }
}

/// One successful rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub slot: usize,
    pub text: String,
    pub temperature: f64,
    pub epsilon_per_token: f64,
    /// Exponential-mechanism draws charged to the ledger, including a
    /// terminating end-of-sequence draw.
    pub tokens: u64,
    pub mode: RewriteMode,
    /// True when the per-token epsilon rests on bounds the decoder could not enforce.
    pub nominal: bool,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotFailure {
    pub slot: usize,
    pub temperature: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseGroup {
    pub source: String,
    pub rewrites: Vec<RewriteRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<SlotFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<u64>,
}

impl ParaphraseGroup {
    pub fn len(&self) -> usize {
        self.rewrites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewrites.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.rewrites.iter().map(|r| r.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub temperature: f64,
    pub count: usize,
}

/// Temperatures for the `m` rewrite slots, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteSchedule {
    entries: Vec<ScheduleEntry>,
}

impl RewriteSchedule {
    pub fn new(entries: Vec<ScheduleEntry>) -> Result<Self, RewriteError> {
        if entries.is_empty() {
            return Err(RewriteError::Schedule("schedule is empty".into()));
        }
        for e in &entries {
            if !(e.temperature.is_finite() && e.temperature > 0.0) {
                return Err(RewriteError::Schedule(format!("temperature {} is not positive", e.temperature)));
            }
            if e.count == 0 {
                return Err(RewriteError::Schedule("entry counts must be positive".into()));
            }
        }
        Ok(Self { entries })
    }

    pub fn uniform(temperature: f64, m: usize) -> Result<Self, RewriteError> {
        Self::new(vec![ScheduleEntry { temperature, count: m }])
    }

    /// One slot per temperature in `lo, lo + step, ..., hi` (inclusive).
    pub fn sweep(lo: f64, hi: f64, step: f64) -> Result<Self, RewriteError> {
        if !(step > 0.0 && lo > 0.0 && hi >= lo) {
            return Err(RewriteError::Schedule(format!("bad sweep {lo}:{hi}:{step}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        let entries = (0..n)
            .map(|i| ScheduleEntry {
                temperature: ((lo + i as f64 * step) * 1e9).round() / 1e9,
                count: 1,
            })
            .collect();
        Self::new(entries)
    }

    /// Parse `lo:hi:step`.
    pub fn parse_sweep(spec: &str) -> Result<Self, RewriteError> {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| RewriteError::Schedule(format!("{spec:?}: {e}")))?;
        match parts.as_slice() {
            [lo, hi, step] => Self::sweep(*lo, *hi, *step),
            _ => Err(RewriteError::Schedule(format!("expected lo:hi:step, got {spec:?}"))),
        }
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    pub fn m(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn is_uniform(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].temperature == w[1].temperature)
    }

    /// Temperature of each slot, in slot order.
    pub fn slots(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::repeat_n(e.temperature, e.count))
            .collect()
    }

    pub fn mean_temperature(&self) -> f64 {
        let slots = self.slots();
        slots.iter().sum::<f64>() / slots.len() as f64
    }
}

/// Plug-in seam for Stage-1: anything that turns one prompt into a group.
pub trait GroupRewriter: Send + Sync {
    fn rewrite_group(
        &self,
        prompt: &str,
        schedule: &RewriteSchedule,
        seed: u64,
        ledger: &mut PrivacyLedger,
    ) -> Result<ParaphraseGroup, RewriteError>;
}

pub enum RewriteEngine {
    WhiteBox(WhiteBoxEngine),
    BlackBox(BlackBoxEngine),
}

/// The bundled private rewriter.
pub struct DpRewriter {
    pub engine: RewriteEngine,
    pub max_tokens: u32,
    pub prompt_template: String,
}

impl DpRewriter {
    pub fn new(engine: RewriteEngine, max_tokens: u32) -> Self {
        Self {
            engine,
            max_tokens,
            prompt_template: DEFAULT_PARAPHRASE_TEMPLATE.to_string(),
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.prompt_template = template.into();
        self
    }

    fn params(&self, temperature: f64) -> Result<RewriteParams, RewriteError> {
        let (mode, bounds) = match &self.engine {
            RewriteEngine::WhiteBox(e) => (RewriteMode::Whitebox, e.bounds),
            RewriteEngine::BlackBox(e) => (RewriteMode::Blackbox, e.nominal_bounds),
        };
        let params = RewriteParams {
            mode,
            temperature,
            epsilon_per_token: Some(epsilon_per_token(temperature, &bounds)?),
            max_tokens: self.max_tokens,
            prompt_template: self.prompt_template.clone(),
            bounds: Some(bounds),
        };
        params.validate()?;
        Ok(params)
    }

    fn run_slot(
        &self,
        prompt: &str,
        slot: usize,
        temperature: f64,
        seed: u64,
    ) -> (Result<RewriteRecord, RewriteError>, PrivacyLedger) {
        let mut ledger = PrivacyLedger::new();
        let params = match self.params(temperature) {
            Ok(p) => p,
            Err(e) => return (Err(e), ledger),
        };
        let result = match &self.engine {
            RewriteEngine::WhiteBox(engine) => {
                let mut rng = slot_rng(seed, slot);
                paraphrase_whitebox(prompt, &params, engine, &mut rng, &mut ledger)
            }
            RewriteEngine::BlackBox(engine) => {
                paraphrase_blackbox(prompt, &params, engine, slot_seed(seed, slot), &mut ledger)
            }
        };
        (result.map(|mut r| {
            r.slot = slot;
            r
        }), ledger)
    }
}

/// Random stream for one slot: ChaCha20 keyed by the root seed, stream = slot.
pub fn slot_rng(seed: u64, slot: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(slot as u64);
    rng
}

/// Per-slot seed forwarded to remote services.
pub fn slot_seed(seed: u64, slot: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(slot as u64)
}

impl GroupRewriter for DpRewriter {
    fn rewrite_group(
        &self,
        prompt: &str,
        schedule: &RewriteSchedule,
        seed: u64,
        ledger: &mut PrivacyLedger,
    ) -> Result<ParaphraseGroup, RewriteError> {
        let slots = schedule.slots();
        let outcomes: Vec<_> = slots
            .par_iter()
            .enumerate()
            .map(|(slot, &t)| self.run_slot(prompt, slot, t, seed))
            .collect();

        let mut rewrites = Vec::new();
        let mut failures = Vec::new();
        for ((slot, &temperature), (result, slot_ledger)) in slots.iter().enumerate().zip(outcomes) {
            ledger.extend(slot_ledger)?;
            match result {
                Ok(r) => rewrites.push(r),
                Err(e) => {
                    log::warn!("rewrite slot {slot} failed: {e}");
                    failures.push(SlotFailure {
                        slot,
                        temperature,
                        error: e.to_string(),
                    });
                }
            }
        }
        if rewrites.is_empty() {
            return Err(RewriteError::AllFailed(slots.len()));
        }
        Ok(ParaphraseGroup {
            source: prompt.to_string(),
            rewrites,
            failures,
            created_at: None,
        })
    }
}
