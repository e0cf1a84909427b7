//! Differentially private prompt sanitization: temperature-calibrated group
//! rewriting, private keyword release, exemplar selection and templated
//! regeneration, plus metrics and an evaluation harness.

pub mod dp;
pub mod eval;
pub mod exemplar;
pub mod keywords;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod rewrite;
