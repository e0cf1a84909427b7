use std::sync::{Arc, Mutex};

use prompt_dp::dp::{ClipBounds, Epsilon, PrivacyLedger, Stage};
use prompt_dp::keywords::{topk_ndp, KeywordHistogram, ReleaseMethod, TopKStrategy};
use prompt_dp::llm::{ChatRequest, ChatResponse, ChatService, FnService, MockChatService, RetryPolicy};
use prompt_dp::pipeline::{budget_report, run_pipeline, PipelineConfig, PipelineStage, Services};
use prompt_dp::prompt::{render_template, FinalPromptRequest};
use prompt_dp::rewrite::{
    GroupRewriter, ParaphraseGroup, RewriteError, RewriteMode, RewriteRecord, RewriteSchedule,
};

const PROMPT: &str = "What's the best place near the old harbor to buy fresh fish for a family dinner?";

fn config() -> PipelineConfig {
    PipelineConfig::new(ClipBounds::with_width(9.7).unwrap())
}

fn mock() -> Arc<dyn ChatService> {
    Arc::new(MockChatService::new(11))
}

fn run(cfg: &PipelineConfig, client: Arc<dyn ChatService>) -> prompt_dp::pipeline::SanitizedResult {
    let rewriter = cfg.blackbox_rewriter(client.clone(), RetryPolicy::immediate(1));
    let services = Services {
        final_client: client.as_ref(),
        scorer: None,
    };
    run_pipeline(PROMPT, cfg, &rewriter, &services).unwrap()
}

#[test]
fn ndp_run_structure() {
    let r = run(&config(), mock());
    assert_eq!(r.group.len(), 10);
    assert!(r.released.words.len() <= 10);
    assert_eq!(r.ledger.total(), r.ledger.total_for(Stage::Rewrite));
    assert_eq!(r.ledger_total, r.ledger.total());
    assert_eq!(r.released.epsilon, Epsilon::Infinite);
    assert_eq!(r.final_prompt, {
        let req = FinalPromptRequest::new(r.exemplar.text.clone(), r.released.words.iter().cloned());
        render_template(&req).unwrap()
    });
    assert_eq!(r.exemplar.text, r.group.rewrites[r.exemplar.index].text);
}

#[test]
fn dp_release_adds_epsilon2() {
    let mut cfg = config();
    cfg.release_method = ReleaseMethod::Dp;
    cfg.epsilon2 = Some(1.0);
    let r = run(&cfg, mock());
    assert_eq!(r.ledger.total(), r.ledger.total_for(Stage::Rewrite) + 1.0);
    assert_eq!(r.released.words.len(), 10);
    assert_eq!(r.released.method, ReleaseMethod::Dp);
}

#[test]
fn deterministic_under_seed() {
    let a = serde_json::to_string(&run(&config(), mock())).unwrap();
    let b = serde_json::to_string(&run(&config(), mock())).unwrap();
    assert_eq!(a, b);
    let mut other = config();
    other.seed = 99;
    let c = run(&other, mock());
    let parsed: serde_json::Value = serde_json::from_str(&a).unwrap();
    let reparsed = serde_json::to_value(&c).unwrap();
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&parsed), keys(&reparsed));
}

/// Records every request that reaches the final stage.
struct Recorder {
    inner: Arc<dyn ChatService>,
    seen: Mutex<Vec<String>>,
}

impl ChatService for Recorder {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, prompt_dp::llm::LlmError> {
        self.seen
            .lock()
            .unwrap()
            .extend(req.messages.iter().map(|m| m.content.clone()));
        self.inner.complete(req)
    }
}

#[test]
fn final_stage_never_sees_original() {
    let cfg = config();
    let rewriter = cfg.blackbox_rewriter(mock(), RetryPolicy::immediate(1));
    let recorder = Recorder {
        inner: mock(),
        seen: Mutex::new(Vec::new()),
    };
    let services = Services {
        final_client: &recorder,
        scorer: None,
    };
    let r = run_pipeline(PROMPT, &cfg, &rewriter, &services).unwrap();
    let seen = recorder.seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0], r.final_prompt);
    let reproduced = r.group.texts().any(|t| t == PROMPT);
    assert!(reproduced || !seen[0].contains(PROMPT));
}

struct Repeat;

impl GroupRewriter for Repeat {
    fn rewrite_group(
        &self,
        prompt: &str,
        schedule: &RewriteSchedule,
        _seed: u64,
        _ledger: &mut PrivacyLedger,
    ) -> Result<ParaphraseGroup, RewriteError> {
        let rewrites = schedule
            .slots()
            .into_iter()
            .enumerate()
            .map(|(slot, temperature)| RewriteRecord {
                slot,
                text: prompt.to_string(),
                temperature,
                epsilon_per_token: 0.0,
                tokens: 0,
                mode: RewriteMode::Blackbox,
                nominal: true,
                attempts: 1,
            })
            .collect();
        Ok(ParaphraseGroup {
            source: prompt.to_string(),
            rewrites,
            failures: Vec::new(),
            created_at: None,
        })
    }
}

#[test]
fn identity_plugin_yields_original_keywords() {
    let cfg = config();
    let client = mock();
    let services = Services {
        final_client: client.as_ref(),
        scorer: None,
    };
    let r = run_pipeline(PROMPT, &cfg, &Repeat, &services).unwrap();
    let direct = topk_ndp(&KeywordHistogram::from_texts([PROMPT]), 10).unwrap();
    assert_eq!(r.released.words, direct.words);
    assert_eq!(r.exemplar.text, PROMPT);
    assert_eq!(r.ledger.total(), 0.0);
    assert!(!r.leakage_flag, "{:?}", r.leaked_words);
}

#[test]
fn closed_forms_with_fixed_token_counts() {
    let fixed: Arc<dyn ChatService> = Arc::new(FnService(|req: &ChatRequest| {
        let text = if req.last_user().starts_with("Paraphrase") {
            format!("alpha beta gamma delta epsilon zeta eta theta iota kappa t{}", req.seed.unwrap_or(0) % 7)
        } else {
            "final".to_string()
        };
        Ok(ChatResponse {
            tokens_generated: 20,
            usage_reported: true,
            text,
            latency_ms: 0,
            attempts: 1,
        })
    }));
    let cfg = config();
    let r = run(&cfg, fixed.clone());
    let eps1 = r.group.rewrites[0].epsilon_per_token;
    assert_eq!(r.ledger_total, (10 * 20) as f64 * eps1);

    let mut dp = cfg.clone();
    dp.release_method = ReleaseMethod::Dp;
    dp.epsilon2 = Some(2.5);
    let r = run(&dp, fixed);
    assert_eq!(r.ledger_total, (10 * 20) as f64 * eps1 + 2.5);
    let report = budget_report(&r);
    assert!(report.contains("m·n·ε₁ + ε₂ = 10·20·19.4 + 2.5"), "{report}");
}

#[test]
fn config_error_before_any_call() {
    let mut cfg = config();
    cfg.release_method = ReleaseMethod::Dp;
    let client = mock();
    let rewriter = cfg.blackbox_rewriter(client.clone(), RetryPolicy::immediate(1));
    let services = Services {
        final_client: client.as_ref(),
        scorer: None,
    };
    let err = run_pipeline(PROMPT, &cfg, &rewriter, &services).unwrap_err();
    assert_eq!(err.stage, PipelineStage::Config);
    assert!(err.partial.group.is_none());
}

#[test]
fn keyword_failure_carries_rewrite_prefix() {
    let mut cfg = config();
    cfg.release_method = ReleaseMethod::Dp;
    cfg.epsilon2 = Some(1.0);
    cfg.k = 500;
    let client = mock();
    let rewriter = cfg.blackbox_rewriter(client.clone(), RetryPolicy::immediate(1));
    let services = Services {
        final_client: client.as_ref(),
        scorer: None,
    };
    let err = run_pipeline(PROMPT, &cfg, &rewriter, &services).unwrap_err();
    assert_eq!(err.stage, PipelineStage::Keywords);
    assert_eq!(err.partial.group.as_ref().unwrap().len(), 10);
    assert!(err.partial.histogram.is_some());
    assert_eq!(err.partial.ledger.len(), 10);

    cfg.k = 3;
    cfg.topk_strategy = TopKStrategy::Joint;
    let err = run_pipeline(PROMPT, &cfg, &rewriter, &services).unwrap_err();
    assert_eq!(err.stage, PipelineStage::Keywords);
}

#[test]
fn final_failure_can_fall_back() {
    let client = mock();
    let down = FnService(|_: &ChatRequest| Err(prompt_dp::llm::LlmError::Transport("down".into())));
    let mut cfg = config();
    let rewriter = cfg.blackbox_rewriter(client.clone(), RetryPolicy::immediate(1));
    let services = Services {
        final_client: &down,
        scorer: None,
    };
    let err = run_pipeline(PROMPT, &cfg, &rewriter, &services).unwrap_err();
    assert_eq!(err.stage, PipelineStage::Generation);
    assert!(err.partial.exemplar.is_some());

    cfg.fallback_to_exemplar = true;
    let r = run_pipeline(PROMPT, &cfg, &rewriter, &services).unwrap();
    assert!(r.fell_back);
    assert_eq!(r.sanitized, r.exemplar.text);
}

#[test]
fn sweep_schedule_report_lists_temperatures() {
    let mut cfg = config();
    cfg.schedule = Some(RewriteSchedule::parse_sweep("0.5:1.5:0.1").unwrap());
    cfg.m = 11;
    let r = run(&cfg, mock());
    assert_eq!(r.group.len(), 11);
    let report = budget_report(&r);
    assert!(report.contains("T=0.5:"), "{report}");
    assert!(report.contains("T=1.5:"), "{report}");
}
