//! Query debiasing: a prompt asking the language model to fix spelling and
//! grammar and to rephrase with common words, and a parser turning its
//! reply into a [`DebiasedQuerySet`].

use crate::backends::{ChatRequest, ContentPart, Message};
use crate::error::{BackendError, ValidationError};
use crate::model::DebiasedQuerySet;

/// `<Query>` is replaced by the raw query and `<Count>` by the number of
/// rewrites, spelled out.
pub const DEBIAS_TEMPLATE: &str = "Raw sentence: '<Query>'\n\n\
Task 1: Please detect and rectify spelling and grammatical mistakes in the raw sentence.\n\
Task 2: Please rewrite the rectified sentence using different wording while ensuring that the rewritten sentence retains the original meaning. \
Please provide <Count> different rewrites. Please avoid rare words and phrases.\n\n\
Please only return the rewritten sentences.";

const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

pub fn count_word(n: usize) -> String {
    NUMBER_WORDS
        .get(n)
        .map(|w| w.to_string())
        .unwrap_or_else(|| n.to_string())
}

fn parse_count_word(word: &str) -> Option<usize> {
    NUMBER_WORDS
        .iter()
        .position(|w| *w == word)
        .or_else(|| word.parse().ok())
}

pub fn render_debias_prompt(raw_query: &str, n_d: usize) -> String {
    DEBIAS_TEMPLATE
        .replace("<Count>", &count_word(n_d))
        .replace("<Query>", raw_query)
}

pub fn build_debias_prompt(
    raw_query: &str,
    n_d: usize,
    model_name: &str,
    temperature: f64,
) -> Result<ChatRequest, BackendError> {
    if raw_query.trim().is_empty() {
        return Err(BackendError::InvalidRequest("query is empty".into()));
    }
    if n_d == 0 {
        return Err(BackendError::InvalidRequest("n_d must be at least 1".into()));
    }
    ChatRequest::new(
        model_name,
        temperature,
        vec![Message::user(vec![ContentPart::Text(render_debias_prompt(
            raw_query, n_d,
        ))])],
        DEBIAS_TEMPLATE,
    )
}

/// Recovers the raw query from a rendered debias prompt.
pub fn extract_raw_query(prompt: &str) -> Option<String> {
    let rest = prompt.strip_prefix("Raw sentence: '")?;
    let end = rest.rfind("'\n\nTask 1:")?;
    Some(rest[..end].to_string())
}

/// Recovers the requested rewrite count from a rendered debias prompt.
pub fn extract_rewrite_count(prompt: &str) -> Option<usize> {
    let rest = &prompt[prompt.find("Please provide ")? + "Please provide ".len()..];
    let word = rest.split_whitespace().next()?;
    parse_count_word(word)
}

const QUOTE_PAIRS: &[(char, char)] = &[('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’'), ('`', '`')];

fn strip_list_marker(line: &str) -> &str {
    let mut s = line.trim_start();
    loop {
        let before = s;
        if let Some(rest) = s.strip_prefix(['-', '*', '•', '–', '—', '+']) {
            s = rest.trim_start();
        }
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(rest) = rest.strip_prefix(['.', ')', ':']) {
                if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                    s = rest.trim_start();
                }
            }
        }
        if let Some(rest) = strip_rewrite_label(s) {
            s = rest;
        }
        if s == before {
            return s;
        }
    }
}

// "Rewrite 2:" / "rewrite:" style labels
fn strip_rewrite_label(s: &str) -> Option<&str> {
    let head = s.get(..7)?;
    if !head.eq_ignore_ascii_case("rewrite") {
        return None;
    }
    let rest = s[7..].trim_start();
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_digit()).trim_start();
    rest.strip_prefix([':', '.', ')', '-']).map(str::trim_start)
}

fn strip_quotes(mut s: &str) -> &str {
    loop {
        let mut changed = false;
        for (open, close) in QUOTE_PAIRS {
            if s.chars().count() >= 2 && s.starts_with(*open) && s.ends_with(*close) {
                s = s[open.len_utf8()..s.len() - close.len_utf8()].trim();
                changed = true;
            }
        }
        if !changed {
            return s;
        }
    }
}

/// Candidate sentences in reply order, cleaned and de-duplicated.
pub fn extract_rewrites(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let cleaned = strip_quotes(strip_list_marker(line.trim()).trim());
        if cleaned.is_empty() || cleaned.ends_with(':') {
            continue;
        }
        if !out.iter().any(|seen| seen == cleaned) {
            out.push(cleaned.to_string());
        }
    }
    out
}

/// Keeps at most `n_d` rewrites; an unusable reply falls back to the raw query.
pub fn parse_debias_response(
    text: &str,
    n_d: usize,
    qid: &str,
    raw_query: &str,
) -> Result<DebiasedQuerySet, ValidationError> {
    let mut rewrites = extract_rewrites(text);
    rewrites.truncate(n_d.max(1));
    if rewrites.is_empty() {
        DebiasedQuerySet::fallback(qid, raw_query)
    } else {
        DebiasedQuerySet::new(qid, raw_query, rewrites, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_embeds_query_verbatim() {
        let req = build_debias_prompt("Person they put the kleenex in a box.", 3, "llama", 0.3).unwrap();
        let text = req.user_text();
        assert!(text.contains("Raw sentence: 'Person they put the kleenex in a box.'"));
        assert!(text.contains("Task 1: Please detect and rectify spelling and grammatical mistakes"));
        assert!(text.contains("Please provide three different rewrites"));
        assert!(text.ends_with("Please only return the rewritten sentences."));
        assert_eq!(req.temperature, 0.3);
    }

    #[test]
    fn empty_query_rejected() {
        assert!(build_debias_prompt("", 3, "m", 0.3).is_err());
        assert!(build_debias_prompt("   ", 3, "m", 0.3).is_err());
    }

    #[test]
    fn prompt_builder_is_pure() {
        let a = build_debias_prompt("q", 3, "m", 0.3).unwrap();
        let b = build_debias_prompt("q", 3, "m", 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn count_follows_n_d() {
        let text = render_debias_prompt("q", 5);
        assert!(text.contains("Please provide five different rewrites"));
        assert_eq!(extract_rewrite_count(&text), Some(5));
        assert_eq!(extract_rewrite_count(&render_debias_prompt("q", 12)), Some(12));
    }

    #[test]
    fn raw_query_recoverable() {
        let q = "it's a 'quoted' query";
        assert_eq!(extract_raw_query(&render_debias_prompt(q, 3)).as_deref(), Some(q));
        assert_eq!(extract_raw_query("hello"), None);
    }

    #[test]
    fn parses_numbered_tissue_rewrites() {
        let reply = "1. A person puts tissues in a box.\n2. They place the tissues in a box.\n3. Someone puts tissues into a box.";
        let set = parse_debias_response(reply, 3, "q1", "Person they put the kleenex in a box.").unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.rewrites()[0], "A person puts tissues in a box.");
        assert_eq!(set.rewrites()[2], "Someone puts tissues into a box.");
        assert!(!set.fallback_used());
    }

    #[test]
    fn empty_reply_falls_back() {
        let set = parse_debias_response("", 3, "q", "raw query").unwrap();
        assert_eq!(set.rewrites(), ["raw query".to_string()]);
        assert!(set.fallback_used());
        let set = parse_debias_response("\n  \n- \n", 3, "q", "raw query").unwrap();
        assert!(set.fallback_used());
    }

    #[test]
    fn truncates_to_n_d() {
        let reply = "1. a\n2. b\n3. c\n4. d\n5. e";
        let set = parse_debias_response(reply, 3, "q", "raw").unwrap();
        assert_eq!(set.rewrites(), ["a", "b", "c"]);
    }

    #[test]
    fn duplicates_collapse_before_truncation() {
        let reply = "1. same\n2. same\n3. other\n4. third";
        let set = parse_debias_response(reply, 3, "q", "raw").unwrap();
        assert_eq!(set.rewrites(), ["same", "other", "third"]);
    }

    #[test]
    fn strips_markers_quotes_and_headers() {
        let reply = "Here are three rewrites:\n- \"A man opens the door.\"\n* 'A man opens a door.'\n• “The man is opening the door.”\n2) Rewrite 2: He opens it.";
        assert_eq!(
            extract_rewrites(reply),
            [
                "A man opens the door.",
                "A man opens a door.",
                "The man is opening the door.",
                "He opens it."
            ]
        );
    }

    #[test]
    fn clean_sentence_is_fixed_point() {
        let s = "A person opens the door.";
        let set = parse_debias_response(s, 3, "q", "raw").unwrap();
        assert_eq!(set.rewrites(), [s]);
        let again = parse_debias_response(&set.rewrites()[0], 3, "q", "raw").unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn numbers_inside_sentences_survive() {
        assert_eq!(extract_rewrites("3 people walk in."), ["3 people walk in."]);
        assert_eq!(extract_rewrites("1. 2 dogs run."), ["2 dogs run."]);
        assert_eq!(extract_rewrites("2.5 liters poured."), ["2.5 liters poured."]);
    }
}
