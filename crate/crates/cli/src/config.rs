use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use prompt_dp::eval::{LexicalAnswerer, SampleSpec, DEFAULT_MAX_MALFORMED, DEFAULT_TEMPERATURES};
use prompt_dp::llm::{ChatService, EndpointConfig, HttpChatClient, MockChatService};
use prompt_dp::pipeline::PipelineConfig;
use prompt_dp::rewrite::RewriteMode;

/// A chat service. API keys come from the environment variable named in
/// the http endpoint, never from the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EndpointSpec {
    Mock {
        #[serde(default)]
        seed: u64,
    },
    /// Keyword-overlap answerer; only valid for answering.
    Lexical,
    Http(EndpointConfig),
}

impl Default for EndpointSpec {
    fn default() -> Self {
        EndpointSpec::Mock { seed: 0 }
    }
}

impl EndpointSpec {
    pub fn build(&self) -> Result<Arc<dyn ChatService>> {
        Ok(match self {
            EndpointSpec::Mock { seed } => Arc::new(MockChatService::new(*seed)),
            EndpointSpec::Lexical => Arc::new(LexicalAnswerer),
            EndpointSpec::Http(cfg) => Arc::new(HttpChatClient::new(cfg)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sample: Option<SampleSpec>,
    #[serde(default = "default_max_malformed")]
    pub max_malformed: f64,
    #[serde(default)]
    pub max_parallel: Option<usize>,
}

fn default_methods() -> Vec<String> {
    vec!["group-ndp".into(), "single-paraphrase".into()]
}
fn default_temperatures() -> Vec<f64> {
    DEFAULT_TEMPERATURES.to_vec()
}
fn default_repeats() -> usize {
    5
}
fn default_max_malformed() -> f64 {
    DEFAULT_MAX_MALFORMED
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            methods: default_methods(),
            temperatures: default_temperatures(),
            repeats: default_repeats(),
            seed: 0,
            sample: None,
            max_malformed: default_max_malformed(),
            max_parallel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub endpoint: EndpointSpec,
    /// Defaults to the lexical answerer.
    #[serde(default)]
    pub answerer: Option<EndpointSpec>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Append-only JSONL journal of results or evaluation rows.
    #[serde(default)]
    pub audit_path: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: CliConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("invalid JSON config {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("invalid TOML config {}", path.display()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline
            .validate()
            .map_err(anyhow::Error::msg)
            .context("invalid [pipeline] section")?;
        if self.pipeline.mode == RewriteMode::Whitebox {
            bail!("whitebox mode needs a local logit oracle and is only available through the library");
        }
        if self.endpoint == EndpointSpec::Lexical {
            bail!("the lexical endpoint can only answer questions; use mock or http for [endpoint]");
        }
        let ev = &self.evaluation;
        if ev.repeats == 0 {
            bail!("evaluation.repeats must be at least 1");
        }
        if ev.temperatures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            bail!("evaluation.temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&ev.max_malformed) {
            bail!("evaluation.max_malformed must be within [0, 1]");
        }
        Ok(())
    }

    pub fn answerer(&self) -> Result<Arc<dyn ChatService>> {
        self.answerer.clone().unwrap_or(EndpointSpec::Lexical).build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[pipeline]
bounds = { b_min = 0.0, b_max = 9.7 }
"#;

    #[test]
    fn minimal_toml_defaults() {
        let cfg: CliConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.endpoint, EndpointSpec::Mock { seed: 0 });
        assert_eq!(cfg.evaluation.temperatures.len(), 9);
        assert_eq!(cfg.evaluation.repeats, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{MINIMAL}\nextra = 1\n");
        assert!(toml::from_str::<CliConfig>(&bad).is_err());
        let bad_endpoint = format!("{MINIMAL}\n[endpoint]\nkind = \"http\"\nbase_url = \"x\"\nmodel = \"m\"\napi_key = \"k\"\n");
        assert!(toml::from_str::<CliConfig>(&bad_endpoint).is_err());
    }

    #[test]
    fn http_endpoint_parses() {
        let text = format!(
            "{MINIMAL}\n[endpoint]\nkind = \"http\"\nbase_url = \"http://localhost:8000/v1\"\nmodel = \"m\"\nmax_inflight = 2\n"
        );
        let cfg: CliConfig = toml::from_str(&text).unwrap();
        match cfg.endpoint {
            EndpointSpec::Http(e) => assert_eq!(e.max_inflight, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dp_release_needs_epsilon2() {
        let text = MINIMAL.replace("[pipeline]", "[pipeline]\nrelease_method = \"DP\"");
        let cfg: CliConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }
}
