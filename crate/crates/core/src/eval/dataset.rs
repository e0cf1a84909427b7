use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const CSQA_CHOICES: usize = 5;
pub const DEFAULT_MAX_MALFORMED: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Csqa,
    Docvqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    CsqaJsonl,
    DocvqaJson,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csqa_jsonl" => Ok(Self::CsqaJsonl),
            "docvqa_json" => Ok(Self::DocvqaJson),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub question: String,
    /// OCR tokens for document questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    pub gold: String,
    pub dataset: DatasetKind,
}

impl QARecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        match self.dataset {
            DatasetKind::Csqa => {
                let choices = self.choices.as_deref().ok_or("multiple-choice record has no choices")?;
                if choices.len() != CSQA_CHOICES {
                    return Err(format!("expected {CSQA_CHOICES} choices, found {}", choices.len()));
                }
                if !choices.iter().any(|c| c.label == self.gold) {
                    return Err(format!("answer key {:?} is not a choice label", self.gold));
                }
                Ok(())
            }
            DatasetKind::Docvqa => match &self.context {
                Some(_) => Ok(()),
                None => Err("document record has no OCR context".into()),
            },
        }
    }
}

/// A record that failed to parse or validate. `index` is the 1-based line
/// for JSONL input and the 0-based array position for JSON input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset document has no \"data\" array")]
    MissingData,
    #[error("{malformed} of {total} records are malformed (limit {limit})")]
    TooManyMalformed { malformed: usize, total: usize, limit: f64 },
    #[error("cannot sample {requested} records from {available}")]
    SampleTooLarge { requested: usize, available: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedDataset {
    pub records: Vec<QARecord>,
    pub errors: Vec<RecordError>,
}

impl ParsedDataset {
    pub fn malformed_fraction(&self) -> f64 {
        let total = self.records.len() + self.errors.len();
        if total == 0 {
            0.0
        } else {
            self.errors.len() as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub sample: Option<SampleSpec>,
    /// Abort when more than this fraction of records is malformed.
    pub max_malformed: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            sample: None,
            max_malformed: DEFAULT_MAX_MALFORMED,
        }
    }
}

fn str_field<'a>(v: &'a Value, key: &str) -> Result<&'a str, String> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing string field {key:?}"))
}

fn id_field(v: &Value, key: &str) -> Result<String, String> {
    match v.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(format!("missing id field {key:?}")),
    }
}

fn csqa_record(v: &Value) -> Result<QARecord, String> {
    let question = v.get("question").ok_or("missing field \"question\"")?;
    let choices = question
        .get("choices")
        .and_then(Value::as_array)
        .ok_or("missing array \"question.choices\"")?
        .iter()
        .map(|c| {
            Ok(Choice {
                label: str_field(c, "label")?.to_string(),
                text: str_field(c, "text")?.to_string(),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let record = QARecord {
        id: id_field(v, "id")?,
        question: str_field(question, "stem")?.to_string(),
        context: None,
        choices: Some(choices),
        gold: str_field(v, "answerKey")?.to_string(),
        dataset: DatasetKind::Csqa,
    };
    record.validate()?;
    Ok(record)
}

fn docvqa_record(v: &Value) -> Result<QARecord, String> {
    let gold = v
        .get("answers")
        .and_then(Value::as_array)
        .and_then(|a| a.first())
        .and_then(Value::as_str)
        .ok_or("missing non-empty string array \"answers\"")?;
    let context = v
        .get("ocr_tokens")
        .and_then(Value::as_array)
        .ok_or("missing array \"ocr_tokens\"")?
        .iter()
        .map(|t| t.as_str().map(str::to_string).ok_or("non-string OCR token"))
        .collect::<Result<Vec<_>, _>>()?;
    let record = QARecord {
        id: id_field(v, "questionId")?,
        question: str_field(v, "question")?.to_string(),
        context: Some(context),
        choices: None,
        gold: gold.to_string(),
        dataset: DatasetKind::Docvqa,
    };
    record.validate()?;
    Ok(record)
}

/// One JSON object per line: `id`, `question.stem`, `question.choices[{label,text}]`, `answerKey`.
/// Blank lines are skipped.
pub fn parse_csqa_jsonl(text: &str) -> ParsedDataset {
    let mut out = ParsedDataset::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(line)
            .map_err(|e| e.to_string())
            .and_then(|v| csqa_record(&v));
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(RecordError { index: i + 1, message }),
        }
    }
    out
}

/// `{"data": [{questionId, question, answers: [..], ocr_tokens: [..]}]}`; the first answer is gold.
pub fn parse_docvqa_json(text: &str) -> Result<ParsedDataset, DatasetError> {
    let doc: Value = serde_json::from_str(text)?;
    let items = doc.get("data").and_then(Value::as_array).ok_or(DatasetError::MissingData)?;
    let mut out = ParsedDataset::default();
    for (i, item) in items.iter().enumerate() {
        match docvqa_record(item) {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(RecordError { index: i, message }),
        }
    }
    Ok(out)
}

pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<ParsedDataset, DatasetError> {
    match format {
        DatasetFormat::CsqaJsonl => Ok(parse_csqa_jsonl(text)),
        DatasetFormat::DocvqaJson => parse_docvqa_json(text),
    }
}

/// Seeded sample of `n` records without replacement, in draw order.
pub fn sample_records(records: &[QARecord], spec: SampleSpec) -> Result<Vec<QARecord>, DatasetError> {
    if spec.n > records.len() {
        return Err(DatasetError::SampleTooLarge {
            requested: spec.n,
            available: records.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    Ok(index::sample(&mut rng, records.len(), spec.n)
        .into_iter()
        .map(|i| records[i].clone())
        .collect())
}

/// Parse, enforce the malformed-record limit, then sample.
pub fn load_dataset(path: &Path, format: DatasetFormat, options: &LoadOptions) -> Result<ParsedDataset, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let mut parsed = parse_dataset(&text, format)?;
    for e in &parsed.errors {
        log::warn!("{}: record {}: {}", path.display(), e.index, e.message);
    }
    if parsed.malformed_fraction() > options.max_malformed {
        return Err(DatasetError::TooManyMalformed {
            malformed: parsed.errors.len(),
            total: parsed.records.len() + parsed.errors.len(),
            limit: options.max_malformed,
        });
    }
    if let Some(spec) = options.sample {
        parsed.records = sample_records(&parsed.records, spec)?;
    }
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csqa_line(id: &str, n_choices: usize, key: &str) -> String {
        let choices: Vec<Value> = ["A", "B", "C", "D", "E"][..n_choices]
            .iter()
            .map(|l| serde_json::json!({"label": l, "text": format!("option {l}")}))
            .collect();
        serde_json::json!({"id": id, "question": {"stem": "Where do fish live?", "choices": choices}, "answerKey": key})
            .to_string()
    }

    #[test]
    fn one_malformed_line_of_three() {
        let text = format!("{}\n{{not json\n{}\n", csqa_line("a", 5, "A"), csqa_line("b", 5, "C"));
        let p = parse_csqa_jsonl(&text);
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.errors.len(), 1);
        assert_eq!(p.errors[0].index, 2);
    }

    #[test]
    fn four_choices_rejected() {
        let p = parse_csqa_jsonl(&csqa_line("a", 4, "A"));
        assert!(p.records.is_empty());
        assert!(p.errors[0].message.contains("expected 5 choices"));
    }

    #[test]
    fn answer_key_must_be_a_label() {
        let p = parse_csqa_jsonl(&csqa_line("a", 5, "Z"));
        assert_eq!(p.errors.len(), 1);
    }

    #[test]
    fn docvqa_parse() {
        let text = r#"{"data":[
            {"questionId": 7, "question": "What is the date?", "answers": ["May 1"], "ocr_tokens": ["Date:", "May", "1"]},
            {"questionId": 8, "question": "Who signed?", "answers": []}
        ]}"#;
        let p = parse_docvqa_json(text).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records[0].id, "7");
        assert_eq!(p.records[0].gold, "May 1");
        assert_eq!(p.errors[0].index, 1);
        assert!(matches!(parse_docvqa_json("{}"), Err(DatasetError::MissingData)));
    }

    fn many(n: usize) -> Vec<QARecord> {
        (0..n)
            .map(|i| QARecord {
                id: format!("q{i}"),
                question: "q?".into(),
                context: Some(vec![]),
                choices: None,
                gold: "x".into(),
                dataset: DatasetKind::Docvqa,
            })
            .collect()
    }

    #[test]
    fn sampling_is_seeded_and_without_replacement() {
        let recs = many(1000);
        let spec = SampleSpec { n: 200, seed: 7 };
        let a = sample_records(&recs, spec).unwrap();
        let b = sample_records(&recs, spec).unwrap();
        let ids: Vec<_> = a.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids, b.iter().map(|r| r.id.clone()).collect::<Vec<_>>());
        let mut uniq = ids.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 200);
        assert!(sample_records(&recs[..5], spec).is_err());
    }

    #[test]
    fn load_enforces_malformed_limit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let text = format!("{}\nbad\n{}\n", csqa_line("a", 5, "A"), csqa_line("b", 5, "B"));
        std::fs::write(&path, text).unwrap();
        let err = load_dataset(&path, DatasetFormat::CsqaJsonl, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DatasetError::TooManyMalformed { malformed: 1, total: 3, .. }));
        let lenient = LoadOptions {
            max_malformed: 1.0,
            ..Default::default()
        };
        let p = load_dataset(&path, DatasetFormat::CsqaJsonl, &lenient).unwrap();
        assert_eq!((p.records.len(), p.errors.len()), (2, 1));
    }
}
