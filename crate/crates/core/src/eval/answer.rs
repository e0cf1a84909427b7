use std::collections::HashSet;

use super::dataset::Choice;
use crate::keywords::tokenize_normalize;
use crate::llm::{ChatRequest, ChatResponse, ChatService, LlmError};

pub const CSQA_HEADER: &str = "Answer the multiple-choice question with the label of the correct choice only.";
pub const CSQA_REASK_HEADER: &str = "Reply with exactly one choice label and nothing else.";
pub const DOCVQA_HEADER: &str = "Answer the question using the document text. Reply with the answer only.";

const QUESTION: &str = "Question: ";
const CHOICES: &str = "Choices:";
const DOCUMENT: &str = "Document: ";

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Closed-answer prompt. `strict` selects the re-ask header.
pub fn csqa_frame(question: &str, choices: &[Choice], strict: bool) -> String {
    let mut s = format!(
        "{}\n{QUESTION}{}\n{CHOICES}",
        if strict { CSQA_REASK_HEADER } else { CSQA_HEADER },
        one_line(question)
    );
    for c in choices {
        s.push_str(&format!("\n{}. {}", c.label, one_line(&c.text)));
    }
    s
}

/// Open-answer prompt over OCR tokens joined by single spaces.
pub fn docvqa_frame(question: &str, ocr_tokens: &[String]) -> String {
    format!(
        "{DOCVQA_HEADER}\n{DOCUMENT}{}\n{QUESTION}{}",
        ocr_tokens.join(" "),
        one_line(question)
    )
}

/// Case-insensitive match of the reply's first token, stripped of
/// punctuation, against `labels`. Returns the canonical label.
pub fn parse_label(reply: &str, labels: &[&str]) -> Option<String> {
    let first = reply.split_whitespace().next()?;
    let token = first.trim_matches(|c: char| !c.is_alphanumeric());
    labels
        .iter()
        .find(|l| l.eq_ignore_ascii_case(token))
        .map(|l| l.to_string())
}

/// Deterministic answerer for both frames, driven by keyword overlap
/// between the question and the choices or document.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalAnswerer;

impl LexicalAnswerer {
    fn answer(content: &str) -> Option<String> {
        let lines: Vec<&str> = content.lines().collect();
        let question = lines.iter().find_map(|l| l.strip_prefix(QUESTION))?;
        let q: HashSet<String> = tokenize_normalize(question).into_iter().collect();

        if let Some(start) = lines.iter().position(|l| *l == CHOICES) {
            let mut best: Option<(usize, &str)> = None;
            for line in &lines[start + 1..] {
                let (label, text) = line.split_once(". ")?;
                let overlap = tokenize_normalize(text).iter().filter(|t| q.contains(*t)).count();
                if best.is_none_or(|(b, _)| overlap > b) {
                    best = Some((overlap, label));
                }
            }
            return best.map(|(_, l)| l.to_string());
        }

        let doc: Vec<&str> = lines.iter().find_map(|l| l.strip_prefix(DOCUMENT))?.split_whitespace().collect();
        let anchor = doc
            .iter()
            .position(|t| tokenize_normalize(t).iter().any(|n| q.contains(n)));
        let span = match anchor {
            Some(i) => &doc[(i + 1).min(doc.len())..(i + 3).min(doc.len())],
            None => &doc[..doc.len().min(2)],
        };
        Some(span.join(" "))
    }
}

impl ChatService for LexicalAnswerer {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        Self::answer(req.last_user())
            .map(ChatResponse::from_text)
            .ok_or_else(|| LlmError::InvalidRequest("prompt is not an answering frame".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn choices() -> Vec<Choice> {
        ["A", "B", "C", "D", "E"]
            .iter()
            .zip(["ocean water", "dry desert", "attic", "moon", "oven"])
            .map(|(l, t)| Choice {
                label: l.to_string(),
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn csqa_layout() {
        let f = csqa_frame("Where\ndo fish live?", &choices()[..2], false);
        assert_eq!(
            f,
            format!("{CSQA_HEADER}\nQuestion: Where do fish live?\nChoices:\nA. ocean water\nB. dry desert")
        );
    }

    #[test]
    fn labels() {
        let l = ["A", "B", "C"];
        assert_eq!(parse_label(" b.", &l), Some("B".into()));
        assert_eq!(parse_label("(C) because", &l), Some("C".into()));
        assert_eq!(parse_label("Answer: A", &l), None);
        assert_eq!(parse_label("", &l), None);
    }

    fn ask(prompt: String) -> String {
        LexicalAnswerer
            .complete(&ChatRequest::single("m", None, prompt, 0.0, 8))
            .unwrap()
            .text
    }

    #[test]
    fn lexical_choice() {
        assert_eq!(ask(csqa_frame("Which desert is dry?", &choices(), false)), "B");
        assert_eq!(ask(csqa_frame("Nothing overlaps", &choices(), false)), "A");
    }

    #[test]
    fn lexical_document() {
        let doc: Vec<String> = "Invoice date May 1 total 40".split(' ').map(String::from).collect();
        assert_eq!(ask(docvqa_frame("What is the date?", &doc)), "May 1");
        assert_eq!(ask(docvqa_frame("Who?", &doc)), "Invoice date");
    }

    #[test]
    fn rejects_other_prompts() {
        assert!(LexicalAnswerer
            .complete(&ChatRequest::single("m", None, "hello", 0.0, 8))
            .is_err());
    }
}
