//! Reading model completions back into structured predictions.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{Layout, NONE_PAYLOAD, SPAN_SEPARATOR};
use crate::types::{Canonical, ChoiceSet, EntityMention};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no choice could be read from the response")]
    NoChoiceFound,
    #[error("option ({0}) does not carry a score")]
    NotAScore(char),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPrediction {
    pub mentions: Vec<EntityMention>,
    pub unparsed_lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoicePrediction {
    pub letters: Vec<char>,
    pub raw: String,
}

fn chars_eq_ci(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// Case-insensitive `strip_prefix`, compared char by char.
fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let mut it = s.char_indices();
    for pc in prefix.chars() {
        let (_, sc) = it.next()?;
        if !chars_eq_ci(sc, pc) {
            return None;
        }
    }
    let idx = it.next().map_or(s.len(), |(i, _)| i);
    Some(&s[idx..])
}

fn after_label<'a>(s: &'a str, label: &str) -> Option<&'a str> {
    strip_prefix_ci(s, label)?.trim_start().strip_prefix(':')
}

/// Finds the label a line starts with, either `Label:` or `Event - Label:`.
fn match_line<'l, 's>(line: &'s str, by_length: &[&'l String]) -> Option<(&'l String, &'s str)> {
    for label in by_length {
        if let Some(payload) = after_label(line, label) {
            return Some((label, payload));
        }
    }
    for (i, _) in line.match_indices('-') {
        let head = line[..i].trim();
        if head.is_empty() || head.contains(':') {
            continue;
        }
        let rest = line[i + 1..].trim_start();
        for label in by_length {
            if let Some(payload) = after_label(rest, label) {
                return Some((label, payload));
            }
        }
    }
    None
}

/// Reads `Label: span ... span` lines. Never fails: lines naming no known
/// label land in `unparsed_lines`; a bare `None` line is read as "no entities".
pub fn parse_token_output(text: &str, label_set: &[String]) -> TokenPrediction {
    let mut by_length: Vec<&String> = label_set.iter().collect();
    by_length.sort_by_key(|l| std::cmp::Reverse(l.chars().count()));

    let mut pred = TokenPrediction::default();
    for raw_line in text.lines() {
        let line = raw_line.trim();
        if line.is_empty() || line.eq_ignore_ascii_case(NONE_PAYLOAD) {
            continue;
        }
        let Some((label, payload)) = match_line(line, &by_length) else {
            pred.unparsed_lines.push(line.to_string());
            continue;
        };
        let payload = payload.trim();
        if payload.eq_ignore_ascii_case(NONE_PAYLOAD) {
            continue;
        }
        for seg in payload.split(SPAN_SEPARATOR) {
            let seg = seg.trim();
            if seg.is_empty() || seg.eq_ignore_ascii_case(NONE_PAYLOAD) {
                continue;
            }
            pred.mentions.push(EntityMention::new(label.clone(), seg));
        }
    }
    pred
}

/// Places unaligned mentions in `source` left to right. Each search starts
/// at a cursor just past the previous hit; on a miss it retries from the
/// start of the source, and a second miss leaves the mention unaligned.
pub fn align_spans(prediction: &TokenPrediction, source: &str) -> TokenPrediction {
    let mut out = prediction.clone();
    let mut cursor = 0usize;
    for m in out.mentions.iter_mut() {
        if m.is_aligned() || m.text.is_empty() {
            continue;
        }
        let hit = source[cursor..]
            .find(&m.text)
            .map(|p| p + cursor)
            .or_else(|| source.find(&m.text));
        if let Some(byte_start) = hit {
            let byte_end = byte_start + m.text.len();
            let start = source[..byte_start].chars().count();
            let end = start + m.text.chars().count();
            m.char_start = Some(start);
            m.char_end = Some(end);
            cursor = byte_end;
        }
    }
    out
}

fn letter_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Z])\)").expect("static regex"))
}

/// `phrase` occurs in `text` with no letter or digit directly on either side.
fn contains_phrase(text: &str, phrase: &str) -> bool {
    !phrase.is_empty()
        && text.match_indices(phrase).any(|(i, m)| {
            let before = text[..i].chars().next_back();
            let after = text[i + m.len()..].chars().next();
            !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
        })
}

/// Extracts `(X)` option tokens in first-occurrence order; falls back to the
/// longest option description quoted verbatim.
pub fn parse_choice_output(text: &str, choices: &ChoiceSet) -> Result<ChoicePrediction, ParseError> {
    let mut letters: Vec<char> = Vec::new();
    let mut skip_until = 0usize;
    for caps in letter_token().captures_iter(text) {
        let whole = caps.get(0).expect("group 0");
        if whole.start() < skip_until {
            continue;
        }
        let letter = caps[1].chars().next().expect("one char");
        let Some(option) = choices.get(letter) else { continue };
        if !letters.contains(&letter) {
            letters.push(letter);
        }
        // Skip tokens inside the option's own description.
        let rest = &text[whole.end()..];
        skip_until = match rest.strip_prefix(' ').and_then(|r| r.strip_prefix(option.description.as_str())) {
            Some(_) => whole.end() + 1 + option.description.len(),
            None => whole.end(),
        };
    }
    if letters.is_empty() {
        if let Some(o) = choices
            .options
            .iter()
            .filter(|o| contains_phrase(text, &o.description))
            .max_by_key(|o| o.description.len())
        {
            letters.push(o.letter);
        }
    }
    if letters.is_empty() && !(choices.multi_select && text.trim().eq_ignore_ascii_case(NONE_PAYLOAD))
    {
        return Err(ParseError::NoChoiceFound);
    }
    Ok(ChoicePrediction { letters, raw: text.to_string() })
}

/// The canonical score of the first predicted letter.
pub fn choice_to_score(pred: &ChoicePrediction, choices: &ChoiceSet) -> Result<i64, ParseError> {
    let first = *pred.letters.first().ok_or(ParseError::NoChoiceFound)?;
    match choices.get(first).map(|o| &o.canonical) {
        Some(Canonical::Score(s)) => Ok(*s),
        Some(Canonical::Label(_)) => Err(ParseError::NotAScore(first)),
        None => Err(ParseError::NoChoiceFound),
    }
}

/// One line of prediction JSONL. Fields that do not apply are omitted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mentions: Option<Vec<EntityMention>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub letters: Option<Vec<char>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    /// Canonical values of the predicted letters under `layout`.
    pub fn canonicals(&self, layout: &Layout) -> Option<Vec<Canonical>> {
        let Layout::Choices { choices } = layout else { return None };
        self.letters.as_ref().map(|ls| {
            ls.iter()
                .filter_map(|l| choices.get(*l).map(|o| o.canonical.clone()))
                .collect()
        })
    }
}

/// Parses `completion` according to how its prompt was laid out. Token
/// mentions are aligned against `source`.
pub fn parse_for_layout(
    instance_id: &str,
    completion: &str,
    layout: &Layout,
    source: &str,
) -> PredictionRecord {
    let mut rec = PredictionRecord { instance_id: instance_id.to_string(), ..Default::default() };
    match layout {
        Layout::Tokens { labels, .. } => {
            let pred = align_spans(&parse_token_output(completion, labels), source);
            let recognized = completion
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .count()
                > pred.unparsed_lines.len();
            if !recognized {
                rec.error = Some("no label line recognized".into());
            }
            rec.mentions = Some(pred.mentions);
        }
        Layout::Choices { choices } => match parse_choice_output(completion, choices) {
            Ok(p) => {
                if choices.is_regression() {
                    match choice_to_score(&p, choices) {
                        Ok(s) => rec.score = Some(s),
                        Err(e) => rec.error = Some(e.to_string()),
                    }
                }
                rec.letters = Some(p.letters);
            }
            Err(e) => rec.error = Some(e.to_string()),
        },
        Layout::Text => rec.text = Some(completion.trim().to_string()),
    }
    rec
}
