use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Aggregate;

pub const REPORT_COLUMNS: [&str; 11] = [
    "method",
    "temperature",
    "q_rouge1_mean",
    "q_rouge1_std",
    "q_rougeL_mean",
    "q_rougeL_std",
    "q_bleu_mean",
    "q_bleu_std",
    "utility_mean",
    "utility_std",
    "ledger_total_mean",
];

/// One CSV line; field order matches `REPORT_COLUMNS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub temperature: f64,
    pub q_rouge1_mean: f64,
    pub q_rouge1_std: f64,
    #[serde(rename = "q_rougeL_mean")]
    pub q_rouge_l_mean: f64,
    #[serde(rename = "q_rougeL_std")]
    pub q_rouge_l_std: f64,
    pub q_bleu_mean: f64,
    pub q_bleu_std: f64,
    pub utility_mean: f64,
    pub utility_std: f64,
    pub ledger_total_mean: f64,
}

impl From<&Aggregate> for ReportRow {
    fn from(a: &Aggregate) -> Self {
        Self {
            method: a.method.clone(),
            temperature: a.temperature,
            q_rouge1_mean: a.q_rouge1.mean,
            q_rouge1_std: a.q_rouge1.std,
            q_rouge_l_mean: a.q_rouge_l.mean,
            q_rouge_l_std: a.q_rouge_l.std,
            q_bleu_mean: a.q_bleu.mean,
            q_bleu_std: a.q_bleu.std,
            utility_mean: a.utility.mean,
            utility_std: a.utility.std,
            ledger_total_mean: a.ledger_total.mean,
        }
    }
}

/// Header plus one row per aggregate. An empty slice yields a header-only file.
pub fn emit_report(aggregates: &[Aggregate], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for a in aggregates {
        w.serialize(ReportRow::from(a))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
