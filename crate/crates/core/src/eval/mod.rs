//! Question-answering evaluation: sanitize each question once, measure its
//! similarity to the original, answer it, score the answer.

mod answer;
mod dataset;
mod report;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use answer::{csqa_frame, docvqa_frame, parse_label, LexicalAnswerer, CSQA_REASK_HEADER};
pub use dataset::{
    load_dataset, parse_csqa_jsonl, parse_dataset, parse_docvqa_json, sample_records, Choice, DatasetError,
    DatasetFormat, DatasetKind, LoadOptions, ParsedDataset, QARecord, RecordError, SampleSpec, CSQA_CHOICES,
    DEFAULT_MAX_MALFORMED,
};
pub use report::{emit_report, read_report, ReportRow, REPORT_COLUMNS};

use crate::dp::{ClipBounds, PrivacyLedger};
use crate::keywords::ReleaseMethod;
use crate::llm::{ChatRequest, ChatService, RetryPolicy};
use crate::metrics::{rouge1, similarity, SimilarityScores};
use crate::pipeline::{run_pipeline, PipelineConfig, Services};
use crate::rewrite::{paraphrase_blackbox, slot_seed, BlackBoxEngine, RewriteMode, RewriteParams};

pub const DEFAULT_TEMPERATURES: [f64; 9] = [0.1, 0.15, 0.2, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5];

#[derive(Debug, Clone, PartialEq)]
pub struct Sanitized {
    pub text: String,
    pub ledger_total: f64,
}

/// Maps a question to its sanitized form. `seed` is fixed per item and
/// repeat and shared across temperatures.
pub trait Sanitizer: Send + Sync {
    fn name(&self) -> &str;
    fn sanitize(&self, question: &str, temperature: f64, seed: u64) -> Result<Sanitized, String>;
}

/// The full three-stage pipeline.
pub struct GroupSanitizer {
    name: String,
    config: PipelineConfig,
    client: Arc<dyn ChatService>,
    retry: RetryPolicy,
}

impl GroupSanitizer {
    /// With `config.schedule` set, the schedule is used as-is and the
    /// requested temperature is ignored.
    pub fn new(config: PipelineConfig, client: Arc<dyn ChatService>) -> Self {
        let name = match config.release_method {
            ReleaseMethod::Ndp => "group-ndp",
            ReleaseMethod::Dp => "group-dp",
        };
        Self {
            name: name.to_string(),
            config,
            client,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

impl Sanitizer for GroupSanitizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn sanitize(&self, question: &str, temperature: f64, seed: u64) -> Result<Sanitized, String> {
        let mut config = self.config.clone();
        config.seed = seed;
        if config.schedule.is_none() {
            config.temperature = temperature;
        }
        let rewriter = config.blackbox_rewriter(self.client.clone(), self.retry.clone());
        let services = Services {
            final_client: self.client.as_ref(),
            scorer: None,
        };
        let result = run_pipeline(question, &config, &rewriter, &services).map_err(|e| e.to_string())?;
        Ok(Sanitized {
            text: result.sanitized,
            ledger_total: result.ledger_total,
        })
    }
}

/// One remote paraphrase per question at the requested temperature.
pub struct SingleParaphraseSanitizer {
    engine: BlackBoxEngine,
    max_tokens: u32,
    template: String,
}

impl SingleParaphraseSanitizer {
    pub fn new(engine: BlackBoxEngine, max_tokens: u32, template: impl Into<String>) -> Self {
        Self {
            engine,
            max_tokens,
            template: template.into(),
        }
    }

    pub fn from_config(config: &PipelineConfig, client: Arc<dyn ChatService>, retry: RetryPolicy) -> Self {
        let mut engine = BlackBoxEngine::new(client, config.model.clone(), config.bounds).with_retry(retry);
        engine.system_prompt = config.system_prompt.clone();
        Self::new(engine, config.max_tokens, config.paraphrase_template.clone())
    }

    fn bounds(&self) -> ClipBounds {
        self.engine.nominal_bounds
    }
}

impl Sanitizer for SingleParaphraseSanitizer {
    fn name(&self) -> &str {
        "single-paraphrase"
    }

    fn sanitize(&self, question: &str, temperature: f64, seed: u64) -> Result<Sanitized, String> {
        let params = RewriteParams {
            mode: RewriteMode::Blackbox,
            temperature,
            epsilon_per_token: None,
            max_tokens: self.max_tokens,
            prompt_template: self.template.clone(),
            bounds: Some(self.bounds()),
        };
        let mut ledger = PrivacyLedger::new();
        let record = paraphrase_blackbox(question, &params, &self.engine, seed, &mut ledger).map_err(|e| e.to_string())?;
        Ok(Sanitized {
            text: record.text,
            ledger_total: ledger.total(),
        })
    }
}

/// No sanitization: the upper corner of the privacy/utility plane.
pub struct IdentitySanitizer;

impl Sanitizer for IdentitySanitizer {
    fn name(&self) -> &str {
        "identity"
    }

    fn sanitize(&self, question: &str, _temperature: f64, _seed: u64) -> Result<Sanitized, String> {
        Ok(Sanitized {
            text: question.to_string(),
            ledger_total: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub item_id: String,
    pub method: String,
    pub temperature: f64,
    pub repeat_index: usize,
    /// Similarity between the original and sanitized question.
    pub privacy: SimilarityScores,
    pub utility: f64,
    pub ledger_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemContext {
    pub temperature: f64,
    pub repeat_index: usize,
    pub seed: u64,
    pub answer_model: String,
    pub answer_max_tokens: u32,
}

fn ask(answerer: &dyn ChatService, ctx: &ItemContext, prompt: String) -> Result<String, String> {
    let req = ChatRequest::single(ctx.answer_model.clone(), None, prompt, 0.0, ctx.answer_max_tokens).with_seed(ctx.seed);
    answerer.complete(&req).map(|r| r.text).map_err(|e| e.to_string())
}

fn answer_utility(record: &QARecord, question: &str, answerer: &dyn ChatService, ctx: &ItemContext) -> Result<f64, String> {
    match record.dataset {
        DatasetKind::Csqa => {
            let choices = record.choices.as_deref().unwrap_or_default();
            let labels: Vec<&str> = choices.iter().map(|c| c.label.as_str()).collect();
            let mut label = parse_label(&ask(answerer, ctx, csqa_frame(question, choices, false))?, &labels);
            if label.is_none() {
                label = parse_label(&ask(answerer, ctx, csqa_frame(question, choices, true))?, &labels);
            }
            Ok(match label {
                Some(l) if l.eq_ignore_ascii_case(&record.gold) => 1.0,
                _ => 0.0,
            })
        }
        DatasetKind::Docvqa => {
            let context = record.context.as_deref().unwrap_or_default();
            let answer = ask(answerer, ctx, docvqa_frame(question, context))?;
            Ok(rouge1(&record.gold, &answer).value)
        }
    }
}

/// Sanitize once, then measure privacy and utility on that same text.
pub fn evaluate_item(
    record: &QARecord,
    sanitizer: &dyn Sanitizer,
    answerer: &dyn ChatService,
    ctx: &ItemContext,
) -> EvalRow {
    let mut row = EvalRow {
        item_id: record.id.clone(),
        method: sanitizer.name().to_string(),
        temperature: ctx.temperature,
        repeat_index: ctx.repeat_index,
        privacy: SimilarityScores {
            rouge1: 0.0,
            rouge_l: 0.0,
            bleu: 0.0,
        },
        utility: 0.0,
        ledger_total: 0.0,
        error: None,
    };
    let sanitized = match sanitizer.sanitize(&record.question, ctx.temperature, ctx.seed) {
        Ok(s) => s,
        Err(e) => {
            row.error = Some(format!("sanitizer: {e}"));
            return row;
        }
    };
    row.privacy = similarity(&record.question, &sanitized.text);
    row.ledger_total = sanitized.ledger_total;
    match answer_utility(record, &sanitized.text, answerer, ctx) {
        Ok(u) => row.utility = u,
        Err(e) => row.error = Some(format!("answerer: {e}")),
    }
    row
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn stat(mut values: Vec<f64>) -> Stat {
    if values.is_empty() {
        return Stat {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = sorted_mean(&mut values);
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    Stat {
        mean,
        std: sorted_mean(&mut sq).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub temperature: f64,
    pub repeats: usize,
    pub rows: usize,
    pub failed: usize,
    pub q_rouge1: Stat,
    pub q_rouge_l: Stat,
    pub q_bleu: Stat,
    pub utility: Stat,
    pub ledger_total: Stat,
}

/// Group rows by (method, temperature). Each field is averaged over the
/// items of one repeat; mean and population std are then taken across
/// repeats. Failed rows are excluded and counted.
pub fn aggregate(rows: &[EvalRow]) -> Vec<Aggregate> {
    type RepeatRows<'a> = BTreeMap<usize, Vec<&'a EvalRow>>;
    let mut groups: BTreeMap<(String, u64), (RepeatRows<'_>, usize, usize)> = BTreeMap::new();
    for r in rows {
        let g = groups
            .entry((r.method.clone(), r.temperature.to_bits()))
            .or_insert_with(|| (BTreeMap::new(), 0, 0));
        g.1 += 1;
        if r.failed() {
            g.2 += 1;
        } else {
            g.0.entry(r.repeat_index).or_default().push(r);
        }
    }
    let mut out: Vec<Aggregate> = groups
        .into_iter()
        .map(|((method, t_bits), (by_repeat, total, failed))| {
            let per_repeat = |f: fn(&EvalRow) -> f64| -> Vec<f64> {
                by_repeat
                    .values()
                    .map(|rs| sorted_mean(&mut rs.iter().map(|r| f(r)).collect::<Vec<_>>()))
                    .collect()
            };
            Aggregate {
                method,
                temperature: f64::from_bits(t_bits),
                repeats: by_repeat.len(),
                rows: total,
                failed,
                q_rouge1: stat(per_repeat(|r| r.privacy.rouge1)),
                q_rouge_l: stat(per_repeat(|r| r.privacy.rouge_l)),
                q_bleu: stat(per_repeat(|r| r.privacy.bleu)),
                utility: stat(per_repeat(|r| r.utility)),
                ledger_total: stat(per_repeat(|r| r.ledger_total)),
            }
        })
        .collect();
    out.sort_by(|a, b| a.method.cmp(&b.method).then(a.temperature.total_cmp(&b.temperature)));
    out
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("experiment needs at least one temperature")]
    NoTemperatures,
    #[error("experiment needs at least one repeat")]
    ZeroRepeats,
    #[error("experiment needs at least one sanitizer")]
    NoSanitizers,
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub temperatures: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    #[serde(default)]
    pub answer_model: String,
    #[serde(default = "default_answer_tokens")]
    pub answer_max_tokens: u32,
    /// Bound on concurrently evaluated items; `None` uses all cores.
    #[serde(default)]
    pub max_parallel: Option<usize>,
}

fn default_answer_tokens() -> u32 {
    32
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            repeats: 5,
            seed: 0,
            answer_model: String::new(),
            answer_max_tokens: default_answer_tokens(),
            max_parallel: None,
        }
    }
}

/// Seed for one (repeat, item) pair, shared by every method and temperature.
pub fn item_seed(seed: u64, repeat: usize, item: usize) -> u64 {
    slot_seed(slot_seed(seed, repeat), item)
}

/// Every sanitizer × temperature × repeat × record. Rows come back in that
/// nesting order regardless of scheduling.
pub fn run_experiment(
    records: &[QARecord],
    sanitizers: &[&dyn Sanitizer],
    answerer: &dyn ChatService,
    config: &ExperimentConfig,
) -> Result<Vec<EvalRow>, EvalError> {
    if sanitizers.is_empty() {
        return Err(EvalError::NoSanitizers);
    }
    if config.temperatures.is_empty() {
        return Err(EvalError::NoTemperatures);
    }
    if config.repeats == 0 {
        return Err(EvalError::ZeroRepeats);
    }
    let mut jobs = Vec::new();
    for (s, _) in sanitizers.iter().enumerate() {
        for &t in &config.temperatures {
            for rep in 0..config.repeats {
                for item in 0..records.len() {
                    jobs.push((s, t, rep, item));
                }
            }
        }
    }
    let run = || -> Vec<EvalRow> {
        jobs.par_iter()
            .map(|&(s, temperature, repeat_index, item)| {
                let ctx = ItemContext {
                    temperature,
                    repeat_index,
                    seed: item_seed(config.seed, repeat_index, item),
                    answer_model: config.answer_model.clone(),
                    answer_max_tokens: config.answer_max_tokens,
                };
                evaluate_item(&records[item], sanitizers[s], answerer, &ctx)
            })
            .collect()
    };
    let rows = match config.max_parallel {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    };
    let failed = rows.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        log::warn!("{failed} of {} evaluation rows failed", rows.len());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatResponse, FnService, LlmError};

    fn csqa(id: &str, question: &str, gold: &str) -> QARecord {
        QARecord {
            id: id.into(),
            question: question.into(),
            context: None,
            choices: Some(
                ["A", "B", "C", "D", "E"]
                    .iter()
                    .zip(["river", "desert", "attic", "moon", "oven"])
                    .map(|(l, t)| Choice {
                        label: l.to_string(),
                        text: t.to_string(),
                    })
                    .collect(),
            ),
            gold: gold.into(),
            dataset: DatasetKind::Csqa,
        }
    }

    fn ctx() -> ItemContext {
        ItemContext {
            temperature: 1.0,
            repeat_index: 0,
            seed: 1,
            answer_model: "m".into(),
            answer_max_tokens: 8,
        }
    }

    struct Constant(&'static str);

    impl Sanitizer for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn sanitize(&self, _: &str, _: f64, _: u64) -> Result<Sanitized, String> {
            Ok(Sanitized {
                text: self.0.into(),
                ledger_total: 0.0,
            })
        }
    }

    #[test]
    fn upper_corner() {
        let oracle = FnService(|_: &ChatRequest| Ok(ChatResponse::from_text("A")));
        let row = evaluate_item(&csqa("1", "Where do fish swim?", "A"), &IdentitySanitizer, &oracle, &ctx());
        assert_eq!((row.privacy.rouge1, row.privacy.rouge_l, row.privacy.bleu), (1.0, 1.0, 1.0));
        assert_eq!(row.utility, 1.0);
    }

    #[test]
    fn lower_corner() {
        let wrong = FnService(|_: &ChatRequest| Ok(ChatResponse::from_text("B")));
        let row = evaluate_item(
            &csqa("1", "Where do fish swim?", "A"),
            &Constant("completely unrelated words entirely"),
            &wrong,
            &ctx(),
        );
        assert_eq!(row.privacy.rouge1, 0.0);
        assert_eq!(row.utility, 0.0);
    }

    #[test]
    fn malformed_answer_reasked_once() {
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let svc = FnService(|_: &ChatRequest| {
            let n = calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(ChatResponse::from_text(if n == 0 { "I think it is a river" } else { "(a)" }))
        });
        let row = evaluate_item(&csqa("1", "q?", "A"), &IdentitySanitizer, &svc, &ctx());
        assert_eq!(row.utility, 1.0);
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[test]
    fn answerer_failure_marks_row() {
        let down = FnService(|_: &ChatRequest| Err(LlmError::Transport("down".into())));
        let row = evaluate_item(&csqa("1", "q?", "A"), &IdentitySanitizer, &down, &ctx());
        assert!(row.failed());
        let agg = aggregate(&[row]);
        assert_eq!((agg[0].rows, agg[0].failed, agg[0].repeats), (1, 1, 0));
    }

    fn row(method: &str, t: f64, rep: usize, u: f64) -> EvalRow {
        EvalRow {
            item_id: "x".into(),
            method: method.into(),
            temperature: t,
            repeat_index: rep,
            privacy: SimilarityScores {
                rouge1: u,
                rouge_l: u,
                bleu: u,
            },
            utility: u,
            ledger_total: 1.0,
            error: None,
        }
    }

    #[test]
    fn aggregate_zero_one() {
        let a = aggregate(&[row("m", 1.0, 0, 0.0), row("m", 1.0, 1, 1.0)]);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].utility, Stat { mean: 0.5, std: 0.5 });
    }

    #[test]
    fn aggregate_identical_repeats() {
        let rows: Vec<_> = (0..5).map(|r| row("m", 0.5, r, 0.3)).collect();
        let a = aggregate(&rows);
        assert_eq!(a[0].q_bleu.std, 0.0);
        assert_eq!(a[0].repeats, 5);
    }

    #[test]
    fn aggregate_permutation_invariant() {
        let mut rows: Vec<_> = (0..40)
            .map(|i| row(["a", "b"][i % 2], [0.1, 1.5][i / 20], i % 5, (i as f64 * 0.37).sin().abs()))
            .collect();
        let a = aggregate(&rows);
        rows.reverse();
        rows.swap(3, 17);
        assert_eq!(aggregate(&rows), a);
        assert_eq!(a.len(), 4);
        assert_eq!((a[0].method.as_str(), a[0].temperature), ("a", 0.1));
    }

    #[test]
    fn experiment_rows_in_nesting_order() {
        let recs = vec![csqa("1", "Where do fish swim?", "A"), csqa("2", "Where is sand?", "B")];
        let cfg = ExperimentConfig {
            temperatures: vec![0.5, 1.0],
            repeats: 2,
            max_parallel: Some(2),
            ..Default::default()
        };
        let rows = run_experiment(&recs, &[&IdentitySanitizer], &LexicalAnswerer, &cfg).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[1].item_id, "2");
        assert_eq!((rows[2].temperature, rows[2].repeat_index), (0.5, 1));
        assert_eq!(rows[4].temperature, 1.0);
        assert!(run_experiment(&recs, &[], &LexicalAnswerer, &cfg).is_err());
    }
}
