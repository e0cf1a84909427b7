use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use prompt_dp::dp::PrivacyLedger;
use prompt_dp::eval::{
    aggregate, emit_report, load_dataset, run_experiment, DatasetFormat, ExperimentConfig, GroupSanitizer,
    IdentitySanitizer, LoadOptions, SampleSpec, Sanitizer, SingleParaphraseSanitizer,
};
use prompt_dp::keywords::{release, KeywordHistogram, KeywordRelease, ReleaseMethod, TopKStrategy};
use prompt_dp::llm::RetryPolicy;
use prompt_dp::metrics::similarity;
use prompt_dp::pipeline::{append_jsonl, budget_report, run_pipeline, Services};
use prompt_dp::rewrite::{calibrate_bounds, RewriteSchedule};

use crate::config::CliConfig;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files: exit 2.
    Usage(anyhow::Error),
    /// Failure while doing the work: exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CliResult = Result<(), CliError>;

trait Classify<T> {
    fn usage(self) -> Result<T, CliError>;
    fn runtime(self) -> Result<T, CliError>;
}

impl<T> Classify<T> for Result<T> {
    fn usage(self) -> Result<T, CliError> {
        self.map_err(CliError::Usage)
    }
    fn runtime(self) -> Result<T, CliError> {
        self.map_err(CliError::Runtime)
    }
}

fn write_json(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn calibrate(samples: &Path, out: &Path) -> CliResult {
    let text = std::fs::read_to_string(samples)
        .with_context(|| format!("cannot read {}", samples.display()))
        .usage()?;
    let values = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .with_context(|| format!("line {}: {l:?} is not a number", i + 1))
        })
        .collect::<Result<Vec<_>>>()
        .usage()?;
    let (bounds, stats) = calibrate_bounds(values).map_err(|e| CliError::Usage(e.into()))?;
    let mut json = serde_json::to_string_pretty(&bounds).map_err(|e| CliError::Runtime(e.into()))?;
    json.push('\n');
    std::fs::write(out, json)
        .with_context(|| format!("cannot write {}", out.display()))
        .runtime()?;
    eprintln!(
        "mean {} std {} over {} samples; bounds [{}, {}]",
        stats.mean,
        stats.std,
        stats.sample_count,
        bounds.b_min(),
        bounds.b_max()
    );
    Ok(())
}

fn read_prompt(arg: &str) -> Result<String> {
    match arg.strip_prefix('@') {
        Some(path) => Ok(std::fs::read_to_string(path)
            .with_context(|| format!("cannot read prompt file {path}"))?
            .trim_end()
            .to_string()),
        None => Ok(arg.to_string()),
    }
}

pub struct SanitizeArgs {
    pub config: PathBuf,
    pub prompt: String,
    pub seed: Option<u64>,
    pub report: bool,
}

pub fn sanitize(args: SanitizeArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = CliConfig::load(&args.config).usage()?;
    if let Some(seed) = args.seed {
        cfg.pipeline.seed = seed;
    }
    let prompt = read_prompt(&args.prompt).usage()?;
    if prompt.trim().is_empty() {
        return Err(CliError::Usage(anyhow!("prompt is empty")));
    }
    let client = cfg.endpoint.build().runtime()?;
    // the HTTP client retries on its own
    let rewriter = cfg.pipeline.blackbox_rewriter(client.clone(), RetryPolicy::immediate(1));
    let services = Services {
        final_client: client.as_ref(),
        scorer: None,
    };
    match run_pipeline(&prompt, &cfg.pipeline, &rewriter, &services) {
        Ok(result) => {
            write_json(out, &result).runtime()?;
            if args.report {
                eprint!("{}", budget_report(&result));
            }
            if let Some(path) = &cfg.audit_path {
                append_jsonl(path, &result)
                    .with_context(|| format!("cannot append to {}", path.display()))
                    .runtime()?;
            }
            Ok(())
        }
        Err(e) => {
            let trail = serde_json::to_string_pretty(&e.partial).unwrap_or_default();
            eprintln!("partial trail:\n{trail}");
            Err(CliError::Runtime(e.into()))
        }
    }
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub format: DatasetFormat,
    pub out: PathBuf,
    pub methods: Option<Vec<String>>,
    pub temperatures: Option<Vec<f64>>,
    pub schedule: Option<String>,
    pub repeats: Option<usize>,
    pub sample: Option<usize>,
    pub sample_seed: Option<u64>,
}

fn sanitizers(cfg: &CliConfig, methods: &[String]) -> Result<Vec<Box<dyn Sanitizer>>> {
    let client = cfg.endpoint.build()?;
    let retry = RetryPolicy::immediate(1);
    methods
        .iter()
        .map(|m| -> Result<Box<dyn Sanitizer>> {
            Ok(match m.as_str() {
                "group-ndp" | "group-dp" => {
                    let mut p = cfg.pipeline.clone();
                    p.release_method = if m == "group-dp" {
                        if p.epsilon2.is_none() {
                            bail!("method group-dp needs pipeline.epsilon2");
                        }
                        ReleaseMethod::Dp
                    } else {
                        ReleaseMethod::Ndp
                    };
                    Box::new(GroupSanitizer::new(p, client.clone()).with_retry(retry.clone()))
                }
                "single-paraphrase" => Box::new(SingleParaphraseSanitizer::from_config(
                    &cfg.pipeline,
                    client.clone(),
                    retry.clone(),
                )),
                "identity" => Box::new(IdentitySanitizer),
                other => bail!("unknown method {other:?}; expected group-ndp, group-dp, single-paraphrase or identity"),
            })
        })
        .collect()
}

pub fn evaluate(args: EvaluateArgs) -> CliResult {
    let mut cfg = CliConfig::load(&args.config).usage()?;
    let methods = args.methods.clone().unwrap_or_else(|| cfg.evaluation.methods.clone());
    let mut temperatures = args
        .temperatures
        .clone()
        .unwrap_or_else(|| cfg.evaluation.temperatures.clone());
    if let Some(spec) = &args.schedule {
        let schedule = RewriteSchedule::parse_sweep(spec).map_err(|e| CliError::Usage(e.into()))?;
        temperatures = vec![schedule.mean_temperature()];
        cfg.pipeline.m = schedule.m();
        cfg.pipeline.schedule = Some(schedule);
    }
    if temperatures.is_empty() || temperatures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(CliError::Usage(anyhow!("temperatures must be a non-empty list of positive numbers")));
    }
    let repeats = args.repeats.unwrap_or(cfg.evaluation.repeats);
    if repeats == 0 {
        return Err(CliError::Usage(anyhow!("--repeats must be at least 1")));
    }
    cfg.validate().usage()?;
    let sanitizers = sanitizers(&cfg, &methods).usage()?;
    let answerer = cfg.answerer().usage()?;

    let sample = match (args.sample, cfg.evaluation.sample) {
        (Some(n), s) => Some(SampleSpec {
            n,
            seed: args.sample_seed.or(s.map(|s| s.seed)).unwrap_or(0),
        }),
        (None, s) => s,
    };
    let options = LoadOptions {
        sample,
        max_malformed: cfg.evaluation.max_malformed,
    };
    let dataset = load_dataset(&args.dataset, args.format, &options).map_err(|e| CliError::Runtime(e.into()))?;
    if !dataset.errors.is_empty() {
        eprintln!("skipped {} malformed records", dataset.errors.len());
    }

    let experiment = ExperimentConfig {
        temperatures,
        repeats,
        seed: cfg.evaluation.seed,
        max_parallel: cfg.evaluation.max_parallel,
        ..Default::default()
    };
    let refs: Vec<&dyn Sanitizer> = sanitizers.iter().map(|s| s.as_ref()).collect();
    let rows = run_experiment(&dataset.records, &refs, answerer.as_ref(), &experiment)
        .map_err(|e| CliError::Runtime(e.into()))?;
    if let Some(path) = &cfg.audit_path {
        for row in &rows {
            append_jsonl(path, row)
                .with_context(|| format!("cannot append to {}", path.display()))
                .runtime()?;
        }
    }
    let aggregates = aggregate(&rows);
    for a in aggregates.iter().filter(|a| a.failed > 0) {
        eprintln!("{} at T={}: {} of {} rows failed", a.method, a.temperature, a.failed, a.rows);
    }
    emit_report(&aggregates, &args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))
        .runtime()?;
    eprintln!(
        "wrote {} groups from {} rows to {}",
        aggregates.len(),
        rows.len(),
        args.out.display()
    );
    Ok(())
}

pub struct KeywordArgs {
    pub input: PathBuf,
    pub k: usize,
    pub epsilon: Option<f64>,
    pub seed: u64,
}

pub fn keywords(args: KeywordArgs, out: &mut dyn Write) -> CliResult {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("cannot read {}", args.input.display()))
        .usage()?;
    let hist = KeywordHistogram::from_texts(text.lines().filter(|l| !l.trim().is_empty()));
    let mode = match args.epsilon {
        Some(epsilon) => KeywordRelease::Dp {
            epsilon,
            strategy: TopKStrategy::Peel,
        },
        None => KeywordRelease::Ndp,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut released = release(&hist, args.k, mode, &mut rng, &mut PrivacyLedger::new())
        .map_err(|e| CliError::Usage(e.into()))?;
    if args.epsilon.is_some() {
        released.seed = Some(args.seed);
    }
    write_json(out, &released).runtime()
}

pub fn score(reference: &str, hypothesis: &str, out: &mut dyn Write) -> CliResult {
    let reference = read_prompt(reference).usage()?;
    let hypothesis = read_prompt(hypothesis).usage()?;
    write_json(out, &similarity(&reference, &hypothesis)).runtime()
}
