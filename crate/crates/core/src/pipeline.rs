//! End-to-end sanitization: group rewriting, keyword release and exemplar
//! choice, then templated regeneration.
//!
//! Stage 3 receives only the exemplar and the released keywords. The
//! original prompt stays in the result for auditing but is never passed
//! past Stage 1.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{ClipBounds, PrivacyLedger, Stage};
use crate::exemplar::{select_exemplar, PerplexityScorer, ScoredParaphrase, UnigramScorer};
use crate::keywords::{build_histogram, release, KeywordHistogram, KeywordRelease, ReleaseMethod, ReleasedKeywords, TopKStrategy};
use crate::llm::{ChatService, RetryPolicy};
use crate::prompt::{generate_sanitized, FinalPromptRequest, GenerationOptions};
use crate::rewrite::{
    slot_seed, BlackBoxEngine, DpRewriter, GroupRewriter, ParaphraseGroup, RewriteEngine, RewriteMode, RewriteSchedule,
    StepOracle, WhiteBoxEngine, DEFAULT_PARAPHRASE_TEMPLATE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_ten")]
    pub m: usize,
    #[serde(default = "default_ten")]
    pub k: usize,
    /// Uniform Stage-1 temperature, used when `schedule` is absent.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub schedule: Option<RewriteSchedule>,
    #[serde(default = "default_release")]
    pub release_method: ReleaseMethod,
    #[serde(default)]
    pub epsilon2: Option<f64>,
    #[serde(default)]
    pub topk_strategy: TopKStrategy,
    pub bounds: ClipBounds,
    #[serde(default = "default_mode")]
    pub mode: RewriteMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_paraphrase_template")]
    pub paraphrase_template: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub system_prompt: Option<String>,
    #[serde(default)]
    pub final_temperature: f64,
    #[serde(default = "default_final_max_tokens")]
    pub final_max_tokens: u32,
    #[serde(default)]
    pub max_regenerations: u32,
    #[serde(default)]
    pub fallback_to_exemplar: bool,
}

fn default_ten() -> usize {
    10
}
fn default_temperature() -> f64 {
    1.0
}
fn default_release() -> ReleaseMethod {
    ReleaseMethod::Ndp
}
fn default_mode() -> RewriteMode {
    RewriteMode::Blackbox
}
fn default_max_tokens() -> u32 {
    64
}
fn default_final_max_tokens() -> u32 {
    128
}
fn default_paraphrase_template() -> String {
    DEFAULT_PARAPHRASE_TEMPLATE.to_string()
}

impl PipelineConfig {
    pub fn new(bounds: ClipBounds) -> Self {
        Self {
            m: 10,
            k: 10,
            temperature: 1.0,
            schedule: None,
            release_method: ReleaseMethod::Ndp,
            epsilon2: None,
            topk_strategy: TopKStrategy::Peel,
            bounds,
            mode: RewriteMode::Blackbox,
            seed: 0,
            max_tokens: 64,
            paraphrase_template: default_paraphrase_template(),
            model: String::new(),
            system_prompt: None,
            final_temperature: 0.0,
            final_max_tokens: 128,
            max_regenerations: 0,
            fallback_to_exemplar: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.m == 0 {
            return Err("m must be at least 1".into());
        }
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if self.max_tokens == 0 || self.final_max_tokens == 0 {
            return Err("token limits must be positive".into());
        }
        match (&self.schedule, self.temperature) {
            (Some(s), _) if s.m() != self.m => {
                return Err(format!("schedule covers {} rewrites but m = {}", s.m(), self.m));
            }
            (None, t) if !(t.is_finite() && t > 0.0) => {
                return Err(format!("temperature must be positive, got {t}"));
            }
            _ => {}
        }
        if !(self.final_temperature.is_finite() && self.final_temperature >= 0.0) {
            return Err("final_temperature must be >= 0".into());
        }
        match (self.release_method, self.epsilon2) {
            (ReleaseMethod::Dp, None) => Err("release_method DP requires epsilon2".into()),
            (ReleaseMethod::Dp, Some(e)) if !(e.is_finite() && e > 0.0) => {
                Err(format!("epsilon2 must be positive, got {e}"))
            }
            _ => Ok(()),
        }
    }

    pub fn effective_schedule(&self) -> Result<RewriteSchedule, String> {
        match &self.schedule {
            Some(s) => Ok(s.clone()),
            None => RewriteSchedule::uniform(self.temperature, self.m).map_err(|e| e.to_string()),
        }
    }

    fn keyword_release(&self) -> KeywordRelease {
        match (self.release_method, self.epsilon2) {
            (ReleaseMethod::Dp, Some(epsilon)) => KeywordRelease::Dp {
                epsilon,
                strategy: self.topk_strategy,
            },
            _ => KeywordRelease::Ndp,
        }
    }

    /// Remote Stage-1 rewriter over `client`, with `bounds` as nominal clip bounds.
    pub fn blackbox_rewriter(&self, client: Arc<dyn ChatService>, retry: RetryPolicy) -> DpRewriter {
        let mut engine = BlackBoxEngine::new(client, self.model.clone(), self.bounds).with_retry(retry);
        engine.system_prompt = self.system_prompt.clone();
        DpRewriter::new(RewriteEngine::BlackBox(engine), self.max_tokens).with_template(self.paraphrase_template.clone())
    }

    /// Local Stage-1 rewriter decoding with `oracle` under `bounds`.
    pub fn whitebox_rewriter(&self, oracle: Arc<dyn StepOracle>) -> DpRewriter {
        let engine = WhiteBoxEngine {
            oracle,
            bounds: self.bounds,
        };
        DpRewriter::new(RewriteEngine::WhiteBox(engine), self.max_tokens).with_template(self.paraphrase_template.clone())
    }
}

/// Outbound services used after Stage 1.
pub struct Services<'a> {
    pub final_client: &'a dyn ChatService,
    /// Defaults to the group-fit unigram scorer.
    pub scorer: Option<&'a dyn PerplexityScorer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizedResult {
    pub original: String,
    pub group: ParaphraseGroup,
    pub histogram: KeywordHistogram,
    pub released: ReleasedKeywords,
    pub exemplar: ScoredParaphrase,
    pub final_prompt: String,
    pub sanitized: String,
    pub leakage_flag: bool,
    pub leaked_words: Vec<String>,
    /// The final service failed and the exemplar was emitted instead.
    pub fell_back: bool,
    pub ledger: PrivacyLedger,
    pub ledger_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Config,
    Rewrite,
    Keywords,
    Exemplar,
    Generation,
}

impl std::fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string));
        f.write_str(s.as_deref().unwrap_or("?"))
    }
}

/// Whatever completed before a stage failed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialTrail {
    pub group: Option<ParaphraseGroup>,
    pub histogram: Option<KeywordHistogram>,
    pub released: Option<ReleasedKeywords>,
    pub exemplar: Option<ScoredParaphrase>,
    pub ledger: PrivacyLedger,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: PipelineStage,
    pub message: String,
    pub partial: Box<PartialTrail>,
}

fn keyword_rng(seed: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Run all three stages on `prompt`.
pub fn run_pipeline(
    prompt: &str,
    config: &PipelineConfig,
    rewriter: &dyn GroupRewriter,
    services: &Services<'_>,
) -> Result<SanitizedResult, PipelineError> {
    let mut trail = PartialTrail::default();
    let fail = |stage, message: String, trail: &PartialTrail| PipelineError {
        stage,
        message,
        partial: Box::new(trail.clone()),
    };

    config.validate().map_err(|m| fail(PipelineStage::Config, m, &trail))?;
    let schedule = config
        .effective_schedule()
        .map_err(|m| fail(PipelineStage::Config, m, &trail))?;

    let group = rewriter
        .rewrite_group(prompt, &schedule, config.seed, &mut trail.ledger)
        .map_err(|e| fail(PipelineStage::Rewrite, e.to_string(), &trail))?;
    trail.group = Some(group.clone());

    // Stage 2 reads only the group texts.
    let histogram = build_histogram(&group);
    trail.histogram = Some(histogram.clone());
    let mut rng = keyword_rng(config.seed);
    let released = release(&histogram, config.k, config.keyword_release(), &mut rng, &mut trail.ledger)
        .map_err(|e| fail(PipelineStage::Keywords, e.to_string(), &trail))?;
    trail.released = Some(released.clone());

    let fallback_scorer;
    let scorer: &dyn PerplexityScorer = match services.scorer {
        Some(s) => s,
        None => {
            fallback_scorer = UnigramScorer::for_group(&group);
            &fallback_scorer
        }
    };
    let exemplar = select_exemplar(&group, scorer, &mut trail.ledger)
        .map_err(|e| fail(PipelineStage::Exemplar, e.to_string(), &trail))?;
    trail.exemplar = Some(exemplar.clone());

    let request = FinalPromptRequest::new(exemplar.text.clone(), released.words.iter().cloned())
        .with_temperature(config.final_temperature);
    let options = GenerationOptions {
        model: config.model.clone(),
        system_prompt: config.system_prompt.clone(),
        max_tokens: config.final_max_tokens,
        max_regenerations: config.max_regenerations,
        fallback_to_exemplar: config.fallback_to_exemplar,
        seed: Some(slot_seed(config.seed, schedule.m())),
    };
    let output = generate_sanitized(&request, services.final_client, &options, &mut trail.ledger)
        .map_err(|e| fail(PipelineStage::Generation, e.to_string(), &trail))?;

    let ledger_total = trail.ledger.total();
    Ok(SanitizedResult {
        original: prompt.to_string(),
        group,
        histogram,
        released,
        exemplar,
        final_prompt: output.final_prompt,
        sanitized: output.sanitized,
        leakage_flag: output.leakage_flag,
        leaked_words: output.leaked_words,
        fell_back: output.fell_back,
        ledger: trail.ledger,
        ledger_total,
    })
}

/// Human-readable ledger table with the composition closed form.
pub fn budget_report(result: &SanitizedResult) -> String {
    ledger_report(&result.ledger)
}

pub fn ledger_report(ledger: &PrivacyLedger) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<24} {:>12} {:>8} {:>14}",
        "stage", "mechanism", "eps/unit", "units", "subtotal"
    );
    for e in ledger.entries() {
        let mechanism = if e.nominal {
            format!("{} (nominal)", e.mechanism)
        } else {
            e.mechanism.clone()
        };
        let _ = writeln!(
            out,
            "{:<16} {:<24} {:>12} {:>8} {:>14}",
            e.stage.to_string(),
            mechanism,
            e.epsilon_per_unit.to_string(),
            e.units,
            fmt_num(e.subtotal())
        );
    }

    let rewrites: Vec<_> = ledger.entries().iter().filter(|e| e.stage == Stage::Rewrite).collect();
    let release_eps = ledger.total_for(Stage::KeywordRelease);
    let release_part = if release_eps > 0.0 {
        format!(" + {}", fmt_num(release_eps))
    } else {
        String::new()
    };
    let mut temps: Vec<f64> = rewrites.iter().filter_map(|e| e.temperature).collect();
    temps.sort_by(f64::total_cmp);
    temps.dedup();
    let per_unit: Vec<f64> = rewrites.iter().filter_map(|e| e.epsilon_per_unit.finite()).collect();
    let uniform_eps = per_unit.windows(2).all(|w| w[0] == w[1]);

    if rewrites.is_empty() {
        // nothing to factor
    } else if uniform_eps {
        let eps1 = per_unit[0];
        let m = rewrites.len();
        let first_n = rewrites[0].units;
        let formula = if release_eps > 0.0 { "m·n·ε₁ + ε₂" } else { "m·n·ε₁" };
        if rewrites.iter().all(|e| e.units == first_n) {
            let _ = writeln!(
                out,
                "closed form {formula} = {m}·{first_n}·{}{release_part}",
                fmt_num(eps1)
            );
        } else {
            let sum_n: u64 = rewrites.iter().map(|e| e.units).sum();
            let _ = writeln!(
                out,
                "closed form {formula} with Σn = {sum_n} over m = {m}: {sum_n}·{}{release_part}",
                fmt_num(eps1)
            );
        }
    } else {
        let _ = writeln!(out, "non-uniform schedule, Σᵢ nᵢ·εᵢ by temperature:");
        for t in &temps {
            let sub: f64 = rewrites
                .iter()
                .filter(|e| e.temperature == Some(*t))
                .map(|e| e.subtotal())
                .sum();
            let _ = writeln!(out, "  T={t}: {}", fmt_num(sub));
        }
    }
    let _ = writeln!(out, "total {}", fmt_num(ledger.total()));
    out
}

fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let s = format!("{x:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Append one JSON document as a line to `path`, creating the file if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let line = serde_json::to_string(value).map_err(std::io::Error::other)?;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{Epsilon, LedgerEntry};

    #[test]
    fn config_validation() {
        let b = ClipBounds::with_width(9.7).unwrap();
        let mut c = PipelineConfig::new(b);
        assert!(c.validate().is_ok());
        c.release_method = ReleaseMethod::Dp;
        assert!(c.validate().is_err());
        c.epsilon2 = Some(1.0);
        assert!(c.validate().is_ok());
        c.schedule = Some(RewriteSchedule::parse_sweep("0.5:1.5:0.1").unwrap());
        assert!(c.validate().is_err());
        c.m = 11;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<PipelineConfig>(r#"{"bounds":{"b_min":0,"b_max":1},"mm":3}"#);
        assert!(err.is_err());
        let ok: PipelineConfig = serde_json::from_str(r#"{"bounds":{"b_min":0,"b_max":1}}"#).unwrap();
        assert_eq!((ok.m, ok.k), (10, 10));
    }

    fn rewrite_entry(eps: f64, n: u64, t: f64) -> LedgerEntry {
        LedgerEntry::new(Stage::Rewrite, "em_decode", Epsilon::Finite(eps), n).with_temperature(t)
    }

    #[test]
    fn report_empty() {
        let r = ledger_report(&PrivacyLedger::new());
        assert!(r.ends_with("total 0\n"));
    }

    #[test]
    fn report_uniform_closed_form() {
        let mut l = PrivacyLedger::new();
        for _ in 0..10 {
            l.append(rewrite_entry(19.4, 20, 1.0)).unwrap();
        }
        l.append(LedgerEntry::new(Stage::KeywordRelease, "topk_peel", Epsilon::Finite(1.0), 1)).unwrap();
        let r = ledger_report(&l);
        assert!(r.contains("m·n·ε₁ + ε₂ = 10·20·19.4 + 1"), "{r}");
        assert!(r.contains("total 3881"), "{r}");
    }

    #[test]
    fn report_nonuniform_lists_temperatures() {
        let mut l = PrivacyLedger::new();
        l.append(rewrite_entry(38.8, 10, 0.5)).unwrap();
        l.append(rewrite_entry(19.4, 10, 1.0)).unwrap();
        let r = ledger_report(&l);
        assert!(r.contains("T=0.5: 388"), "{r}");
        assert!(r.contains("T=1: 194"), "{r}");
    }

    #[test]
    fn jsonl_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audit.jsonl");
        append_jsonl(&p, &serde_json::json!({"a": 1})).unwrap();
        append_jsonl(&p, &serde_json::json!({"a": 2})).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().count(), 2);
    }
}
