//! Deterministic answer extraction.
//!
//! `parse` is a total function: every response maps to exactly one of
//! OPTION / ABSTAIN / UNPARSEABLE, with rule precedence fixed in the
//! order implemented below.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::perturb::{PerturbedInstance, PromptMode};

/// Parse outcome for one model response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParsedAnswer {
    #[serde(rename = "OPTION")]
    Chosen(Label),
    #[serde(rename = "ABSTAIN")]
    Abstain,
    #[serde(rename = "UNPARSEABLE")]
    Unparseable,
}

impl ParsedAnswer {
    pub fn chosen_label(self) -> Option<Label> {
        match self {
            ParsedAnswer::Chosen(label) => Some(label),
            _ => None,
        }
    }
}

/// Answer extractor with a configurable refusal lexicon.
#[derive(Debug, Clone)]
pub struct AnswerParser {
    refusal_lexicon: Vec<String>,
}

impl Default for AnswerParser {
    fn default() -> Self {
        AnswerParser::new(
            ["cannot", "unable to determine", "without the image"]
                .into_iter()
                .map(str::to_string)
                .collect(),
        )
    }
}

impl AnswerParser {
    pub fn new(refusal_lexicon: Vec<String>) -> Self {
        AnswerParser {
            refusal_lexicon: refusal_lexicon
                .into_iter()
                .map(|p| p.to_lowercase())
                .collect(),
        }
    }

    /// Extract the chosen option, an abstention, or UNPARSEABLE.
    ///
    /// COT responses are first narrowed to the innermost
    /// `<answer>...</answer>` span (falling back to the full text when the
    /// tags are absent), then run through the DIRECT rules:
    /// 1. a leading option letter, optionally "."/")" separated, whose
    ///    trailing text (if any) case-insensitively matches that option;
    /// 2. exactly one option text occurring as a whole-phrase
    ///    case-insensitive match anywhere in the response;
    /// 3. a refusal-lexicon hit -> ABSTAIN;
    /// 4. otherwise UNPARSEABLE.
    pub fn parse(&self, raw: &str, instance: &PerturbedInstance, mode: PromptMode) -> ParsedAnswer {
        let target = match mode {
            PromptMode::Cot => innermost_answer_span(raw).unwrap_or(raw),
            PromptMode::Direct => raw,
        };
        if let Some(label) = leading_letter_match(target, instance) {
            return ParsedAnswer::Chosen(label);
        }
        if let Some(label) = unique_option_text_match(target, instance) {
            return ParsedAnswer::Chosen(label);
        }
        let lower = target.to_lowercase();
        if self.refusal_lexicon.iter().any(|p| lower.contains(p)) {
            return ParsedAnswer::Abstain;
        }
        ParsedAnswer::Unparseable
    }
}

fn innermost_answer_span(raw: &str) -> Option<&str> {
    let open = raw.rfind("<answer>")?;
    let inner = &raw[open + "<answer>".len()..];
    let close = inner.find("</answer>")?;
    Some(&inner[..close])
}

fn texts_match(response: &str, option_text: &str) -> bool {
    let response = response.trim();
    if response.eq_ignore_ascii_case(option_text.trim()) {
        return true;
    }
    // Tolerate a single trailing period added by the model.
    response
        .strip_suffix('.')
        .is_some_and(|r| r.trim_end().eq_ignore_ascii_case(option_text.trim()))
}

fn leading_letter_match(raw: &str, instance: &PerturbedInstance) -> Option<Label> {
    let trimmed = raw.trim_start();
    let mut chars = trimmed.chars();
    let first = chars.next()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    // The letter must stand alone, not begin a word.
    let mut rest = chars.as_str();
    if rest.chars().next().is_some_and(|c| c.is_alphanumeric()) {
        return None;
    }
    let label = Label::new(first.to_ascii_uppercase()).ok()?;
    let option = instance.option_by_label(label)?;
    rest = rest.trim_start();
    if let Some(stripped) = rest.strip_prefix(['.', ')']) {
        rest = stripped;
    }
    if rest.trim().is_empty() || texts_match(rest, &option.text) {
        Some(label)
    } else {
        None
    }
}

fn is_boundary(c: Option<char>) -> bool {
    c.is_none_or(|c| !c.is_alphanumeric())
}

fn contains_whole_phrase(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut start = 0;
    while let Some(found) = haystack[start..].find(needle) {
        let at = start + found;
        let before = haystack[..at].chars().next_back();
        let after = haystack[at + needle.len()..].chars().next();
        if is_boundary(before) && is_boundary(after) {
            return true;
        }
        start = at + needle.len();
    }
    false
}

fn unique_option_text_match(raw: &str, instance: &PerturbedInstance) -> Option<Label> {
    let lower = raw.to_lowercase();
    let mut hit = None;
    for option in &instance.options_after {
        if contains_whole_phrase(&lower, &option.text.to_lowercase()) {
            if hit.is_some() {
                return None; // ambiguous
            }
            hit = Some(option.label);
        }
    }
    hit
}
