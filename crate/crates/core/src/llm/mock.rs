use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{estimate_tokens, ChatRequest, ChatResponse, ChatService, LlmError};
use crate::keywords::tokenize_normalize;
use crate::prompt::{AVOID_HEADER, EXEMPLAR_HEADER};

/// Substitutions applied at every temperature.
static FORCED: &[(&str, &str)] = &[
    ("what's", "what is"),
    ("isn't", "is not"),
    ("don't", "do not"),
    ("doesn't", "does not"),
    ("can't", "cannot"),
    ("won't", "will not"),
    ("it's", "it is"),
];

/// Single-word synonyms, sorted by key.
static SYNONYMS: &[(&str, &[&str])] = &[
    ("a", &["one", "some"]),
    ("animal", &["creature", "beast"]),
    ("are", &["remain", "seem"]),
    ("big", &["large", "huge", "vast"]),
    ("book", &["volume", "text"]),
    ("buy", &["purchase", "acquire"]),
    ("can", &["could", "may"]),
    ("car", &["vehicle", "automobile"]),
    ("child", &["kid", "youngster"]),
    ("city", &["town", "metropolis"]),
    ("do", &["perform", "carry"]),
    ("does", &["performs"]),
    ("eat", &["consume", "devour"]),
    ("feel", &["sense", "experience"]),
    ("find", &["locate", "discover", "spot"]),
    ("food", &["meal", "nourishment"]),
    ("friend", &["companion", "pal"]),
    ("get", &["obtain", "receive"]),
    ("go", &["head", "travel"]),
    ("happy", &["glad", "joyful"]),
    ("have", &["possess", "hold"]),
    ("house", &["home", "dwelling"]),
    ("in", &["inside", "within"]),
    ("is", &["remains", "seems"]),
    ("keep", &["store", "retain"]),
    ("kind", &["type", "sort"]),
    ("large", &["big", "sizable"]),
    ("likely", &["probably", "plausibly"]),
    ("live", &["reside", "dwell"]),
    ("look", &["search", "seek"]),
    ("make", &["create", "produce"]),
    ("man", &["gentleman", "guy"]),
    ("might", &["may", "could"]),
    ("need", &["require", "want"]),
    ("of", &["from", "regarding"]),
    ("often", &["frequently", "regularly"]),
    ("on", &["upon", "atop"]),
    ("people", &["persons", "folks", "individuals"]),
    ("person", &["individual", "human"]),
    ("place", &["location", "spot", "site"]),
    ("put", &["place", "set"]),
    ("quickly", &["rapidly", "swiftly"]),
    ("see", &["observe", "notice"]),
    ("small", &["little", "tiny"]),
    ("someone", &["somebody"]),
    ("store", &["shop", "market"]),
    ("the", &["this", "that"]),
    ("thing", &["object", "item"]),
    ("to", &["toward", "into"]),
    ("use", &["utilize", "employ"]),
    ("want", &["desire", "wish"]),
    ("what", &["which"]),
    ("where", &["whereabouts"]),
    ("why", &["wherefore"]),
    ("woman", &["lady"]),
    ("work", &["labor", "toil"]),
    ("would", &["could", "might"]),
];

fn synonyms(word: &str) -> Option<&'static [&'static str]> {
    SYNONYMS
        .binary_search_by(|(k, _)| k.cmp(&word))
        .ok()
        .map(|i| SYNONYMS[i].1)
}

/// Deterministic offline chat model.
///
/// Output is a pure function of the message contents, the configured seed,
/// the request seed, and the temperature bucket (hundredths). Each word is
/// edited when its per-position uniform draw falls below `1 - exp(-T)`;
/// draws do not depend on temperature, so the edits made at a lower
/// temperature are a subset of those made at a higher one.
///
/// Two request frames are recognized: a final-prompt template (the
/// exemplar is rewritten and the listed tokens are left out), and an
/// instruction line ending in `:` followed by a payload (only the payload
/// is rewritten). Anything else is rewritten whole.
#[derive(Debug, Clone, Default)]
pub struct MockChatService {
    pub seed: u64,
}

impl MockChatService {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn stream(&self, req: &ChatRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(req.seed.unwrap_or(0).to_le_bytes());
        for m in &req.messages {
            h.update(m.content.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(key)
    }

    /// The rewrite the mock returns for `req`.
    pub fn respond(&self, req: &ChatRequest) -> String {
        let bucket = (req.temperature * 100.0).round().max(0.0) / 100.0;
        let intensity = 1.0 - (-bucket).exp();
        let mut rng = self.stream(req);
        let content = req.last_user();

        if let Some((exemplar, forbidden)) = parse_final_prompt(content) {
            let rewritten = perturb(exemplar, intensity, &mut rng);
            return rewritten
                .split_whitespace()
                .filter(|tok| {
                    tokenize_normalize(tok)
                        .iter()
                        .all(|t| !forbidden.contains(t))
                })
                .collect::<Vec<_>>()
                .join(" ");
        }
        let payload = match content.split_once('\n') {
            Some((head, rest)) if head.trim_end().ends_with(':') => rest,
            _ => content,
        };
        perturb(payload, intensity, &mut rng)
    }
}

impl ChatService for MockChatService {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let text = self.respond(req);
        Ok(ChatResponse {
            tokens_generated: estimate_tokens(&text).max(1),
            usage_reported: true,
            text,
            latency_ms: 0,
            attempts: 1,
        })
    }
}

fn parse_final_prompt(content: &str) -> Option<(&str, Vec<String>)> {
    let mut lines = content.split('\n');
    if lines.next()? != EXEMPLAR_HEADER {
        return None;
    }
    let exemplar = lines.next()?;
    if lines.next()? != AVOID_HEADER {
        return None;
    }
    let forbidden = lines
        .next()
        .unwrap_or("")
        .split(", ")
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    Some((exemplar, forbidden))
}

fn split_affixes(token: &str) -> (&str, &str, &str) {
    let start = token.find(|c: char| c.is_alphanumeric()).unwrap_or(token.len());
    let end = token
        .rfind(|c: char| c.is_alphanumeric())
        .map(|i| i + token[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(start);
    (&token[..start], &token[start..end.max(start)], &token[end.max(start)..])
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut c = replacement.chars();
        match c.next() {
            Some(first) => first.to_uppercase().chain(c).collect(),
            None => String::new(),
        }
    } else {
        replacement.to_string()
    }
}

fn perturb(text: &str, intensity: f64, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = Vec::new();
    for token in text.split_whitespace() {
        // consume a fixed number of draws per token so positions stay aligned
        let edit_draw: f64 = rng.random();
        let pick: usize = rng.random_range(0..usize::MAX);
        let (pre, core, post) = split_affixes(token);
        let lower = core.to_lowercase();
        if let Some((_, expansion)) = FORCED.iter().find(|(k, _)| *k == lower) {
            words.push(format!("{pre}{}{post}", match_case(core, expansion)));
            continue;
        }
        match synonyms(&lower) {
            Some(alts) if edit_draw < intensity => {
                let alt = alts[pick % alts.len()];
                words.push(format!("{pre}{}{post}", match_case(core, alt)));
            }
            _ => words.push(token.to_string()),
        }
    }
    let mut i = 0;
    while i + 1 < words.len() {
        let swap_draw: f64 = rng.random();
        if swap_draw < intensity / 3.0 {
            words.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    words.join(" ")
}
