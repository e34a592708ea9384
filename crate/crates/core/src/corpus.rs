//! Corpus assembly: ingestion of annotated datasets, preprocessing
//! (sentence splitting, context windows, summarization length filters),
//! per-task sampling budgets, and rendering to prompt-pair JSONL with a
//! manifest that accounts for every ingested instance.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{self, default_label_aliases, expand_label_name, RenderOptions, ELLIPSIS};
use crate::rng::{derive_seed, SplitMix64};
use crate::types::{
    char_len, EntityMention, Gold, LabelSet, NluInstance, OutputCategory, PromptPair, TaskKind,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("no instances available for task {0}")]
    EmptyTaskPool(TaskKind),
    #[error("sentence index {index} out of range for {len} sentences")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("summarization preprocessing failed: {0}")]
    Summarization(String),
    #[error("invalid corpus config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Biomedical,
    Clinical,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    ConllBio,
    BratStandoff,
    JsonlNative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
    /// The dataset ships no train split; the whole of it is used.
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub task: TaskKind,
    pub domain: Domain,
    pub format: SourceFormat,
    pub path: PathBuf,
    #[serde(default)]
    pub split: Split,
    /// Label order for BIO and standoff sources; defaults to first appearance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    /// Extra abbreviation expansions on top of the built-in ones.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub label_aliases: BTreeMap<String, String>,
    /// Summarize each document as this type before classification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarize_type: Option<String>,
    /// Keep summarization instances whose input has fewer words than this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_input_words: Option<usize>,
    /// Also require the summary to be at most half the input length.
    #[serde(default)]
    pub output_ratio_filter: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

/// Instances read from one dataset plus recoverable oddities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub instances: Vec<NluInstance>,
    pub warnings: Vec<String>,
}

fn aliases_for(desc: &DatasetDescriptor) -> BTreeMap<String, String> {
    let mut a = default_label_aliases();
    a.extend(desc.label_aliases.iter().map(|(k, v)| (k.clone(), v.clone())));
    a
}

fn expand_instance_labels(inst: &mut NluInstance, aliases: &BTreeMap<String, String>) {
    let expand = |s: &mut String| *s = expand_label_name(s, aliases);
    if let LabelSet::Labels(labels) = &mut inst.label_set {
        labels.iter_mut().for_each(expand);
    }
    match &mut inst.gold {
        Gold::Mentions(ms) => ms.iter_mut().for_each(|m| expand(&mut m.label)),
        Gold::Labels(ls) => ls.iter_mut().for_each(expand),
        _ => {}
    }
}

fn token_instance(
    desc: &DatasetDescriptor,
    id: String,
    text: String,
    labels: Vec<String>,
    mentions: Vec<EntityMention>,
) -> NluInstance {
    NluInstance {
        id,
        dataset: desc.name.clone(),
        task: desc.task,
        source_text: text,
        context_before: None,
        context_after: None,
        label_set: LabelSet::Labels(labels),
        gold: Gold::Mentions(mentions),
        question: None,
        premise: None,
        hypothesis: None,
        trigger: None,
        entity_pair: None,
        target: None,
        template: desc.template.clone(),
    }
}

fn label_order(desc: &DatasetDescriptor, seen: Vec<String>) -> Vec<String> {
    desc.labels.clone().unwrap_or(seen)
}

fn push_unique(seen: &mut Vec<String>, label: &str) {
    if !seen.iter().any(|l| l == label) {
        seen.push(label.to_string());
    }
}

/// Parses CoNLL-style BIO text: one `token<TAB>tag` per line (the last
/// whitespace-separated column is the tag), blank lines between sentences.
pub fn parse_conll_bio(desc: &DatasetDescriptor, content: &str) -> Result<Ingested, CorpusError> {
    struct Sent {
        text: String,
        mentions: Vec<EntityMention>,
    }
    let mut sentences: Vec<Sent> = Vec::new();
    let mut seen_labels: Vec<String> = Vec::new();

    let mut text = String::new();
    let mut mentions: Vec<EntityMention> = Vec::new();
    let mut open: Option<(String, usize)> = None; // label, char start
    let mut text_chars = 0usize;

    let close = |open: &mut Option<(String, usize)>,
                 mentions: &mut Vec<EntityMention>,
                 text: &str,
                 end: usize| {
        if let Some((label, start)) = open.take() {
            let span = crate::types::char_slice(text, start, end).unwrap_or_default().to_string();
            mentions.push(EntityMention::new(label, span).with_offsets(start, end));
        }
    };

    let lines: Vec<&str> = content.lines().collect();
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim_end();
        let is_break = line.trim().is_empty() || line.starts_with("-DOCSTART-");
        if is_break {
            if !text.is_empty() {
                close(&mut open, &mut mentions, &text, text_chars);
                sentences.push(Sent {
                    text: std::mem::take(&mut text),
                    mentions: std::mem::take(&mut mentions),
                });
                text_chars = 0;
            }
            continue;
        }
        let cols: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split_whitespace().collect()
        };
        if cols.len() < 2 {
            return Err(CorpusError::MalformedRecord {
                line_no: i + 1,
                reason: format!("expected `token<TAB>tag`, got `{line}`"),
            });
        }
        let token = cols[0].trim();
        let tag = cols[cols.len() - 1].trim();
        if token.is_empty() {
            return Err(CorpusError::MalformedRecord { line_no: i + 1, reason: "empty token".into() });
        }
        let prev_end = text_chars;
        if !text.is_empty() {
            text.push(' ');
            text_chars += 1;
        }
        let tok_start = text_chars;
        text.push_str(token);
        text_chars += char_len(token);

        if tag == "O" {
            close(&mut open, &mut mentions, &text, prev_end);
        } else if let Some(label) = tag.strip_prefix("B-") {
            close(&mut open, &mut mentions, &text, prev_end);
            push_unique(&mut seen_labels, label);
            open = Some((label.to_string(), tok_start));
        } else if let Some(label) = tag.strip_prefix("I-") {
            // An I- tag that does not continue an entity of the same type starts one.
            let continues = matches!(&open, Some((l, _)) if l == label);
            if !continues {
                close(&mut open, &mut mentions, &text, prev_end);
                push_unique(&mut seen_labels, label);
                open = Some((label.to_string(), tok_start));
            }
        } else {
            return Err(CorpusError::MalformedRecord {
                line_no: i + 1,
                reason: format!("tag `{tag}` is not O, B-* or I-*"),
            });
        }
    }
    if !text.is_empty() {
        close(&mut open, &mut mentions, &text, text_chars);
        sentences.push(Sent { text, mentions });
    }

    let labels = label_order(desc, seen_labels);
    let instances = sentences
        .into_iter()
        .enumerate()
        .map(|(n, s)| token_instance(desc, format!("{}:{n}", desc.name), s.text, labels.clone(), s.mentions))
        .collect();
    Ok(Ingested { instances, warnings: Vec::new() })
}

/// Parses the entity (`T`) lines of a standoff `.ann` file against its text.
/// Other annotation kinds are ignored; discontinuous spans are skipped
/// with a warning.
pub fn parse_standoff(
    ann: &str,
    text: &str,
    warnings: &mut Vec<String>,
) -> Result<Vec<EntityMention>, CorpusError> {
    let mut out = Vec::new();
    for (i, raw) in ann.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches(['\r', '\n']);
        if !line.starts_with('T') {
            continue;
        }
        let (id, middle, surface) = if line.contains('\t') {
            let mut parts = line.splitn(3, '\t');
            let id = parts.next().unwrap_or_default();
            let middle = parts.next().unwrap_or_default();
            (id, middle.to_string(), parts.next().unwrap_or_default().to_string())
        } else {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 5 {
                return Err(CorpusError::MalformedRecord {
                    line_no,
                    reason: format!("expected `T<id> <Label> <start> <end> <text>`, got `{line}`"),
                });
            }
            // Surface text starts after the fourth field.
            let mut rest = line;
            for f in &fields[..4] {
                rest = rest.trim_start();
                rest = &rest[f.len()..];
            }
            (fields[0], fields[1..4].join(" "), rest.trim_start().to_string())
        };
        if middle.contains(';') {
            warnings.push(format!("line {line_no}: discontinuous entity {id} skipped"));
            continue;
        }
        let fields: Vec<&str> = middle.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(CorpusError::MalformedRecord {
                line_no,
                reason: format!("expected `<Label> <start> <end>`, got `{middle}`"),
            });
        }
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| CorpusError::MalformedRecord {
                line_no,
                reason: format!("offset `{s}` is not a number"),
            })
        };
        let (start, end) = (parse(fields[1])?, parse(fields[2])?);
        let mention = EntityMention::new(fields[0], surface).with_offsets(start, end);
        mention
            .check_offsets(text)
            .map_err(|e| CorpusError::MalformedRecord { line_no, reason: e.to_string() })?;
        out.push(mention);
    }
    Ok(out)
}

fn standoff_pairs(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CorpusError> {
    if path.is_dir() {
        let mut anns: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ann"))
            .collect();
        anns.sort();
        Ok(anns.into_iter().map(|a| (a.with_extension("txt"), a)).collect())
    } else {
        Ok(vec![(path.with_extension("txt"), path.to_path_buf())])
    }
}

/// Splits a standoff document into sentence-level instances, merging
/// sentences that an entity straddles.
fn standoff_document(
    desc: &DatasetDescriptor,
    doc_id: &str,
    text: &str,
    mentions: Vec<EntityMention>,
    labels: &[String],
) -> Vec<NluInstance> {
    let mut spans: Vec<(usize, usize)> = split_sentences(text)
        .into_iter()
        .map(|s| (s.char_start, s.char_end))
        .collect();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for span in spans.drain(..) {
        if let Some(last) = merged.last_mut() {
            let straddled = mentions.iter().any(|m| {
                let (s, e) = m.span().expect("standoff mentions carry offsets");
                s < last.1 && e > last.1
            });
            if straddled {
                last.1 = span.1;
                continue;
            }
        }
        merged.push(span);
    }
    merged
        .into_iter()
        .enumerate()
        .map(|(k, (s, e))| {
            let sentence = crate::types::char_slice(text, s, e).unwrap_or_default().to_string();
            let local: Vec<EntityMention> = mentions
                .iter()
                .filter_map(|m| {
                    let (ms, me) = m.span()?;
                    (ms >= s && me <= e).then(|| {
                        EntityMention::new(m.label.clone(), m.text.clone()).with_offsets(ms - s, me - s)
                    })
                })
                .collect();
            token_instance(desc, format!("{}:{doc_id}:{k}", desc.name), sentence, labels.to_vec(), local)
        })
        .collect()
}

fn ingest_standoff(desc: &DatasetDescriptor) -> Result<Ingested, CorpusError> {
    let mut out = Ingested::default();
    let mut docs = Vec::new();
    let mut seen_labels = Vec::new();
    for (txt_path, ann_path) in standoff_pairs(&desc.path)? {
        let text = fs::read_to_string(&txt_path).map_err(io_err(&txt_path))?;
        let ann = fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?;
        let mentions = parse_standoff(&ann, &text, &mut out.warnings)?;
        for m in &mentions {
            push_unique(&mut seen_labels, &m.label);
        }
        let doc_id = ann_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        docs.push((doc_id, text, mentions));
    }
    let labels = label_order(desc, seen_labels);
    for (doc_id, text, mentions) in docs {
        out.instances.extend(standoff_document(desc, &doc_id, &text, mentions, &labels));
    }
    Ok(out)
}

/// Reads canonical instance JSONL, one object per line.
pub fn parse_jsonl_native(desc: &DatasetDescriptor, content: &str) -> Result<Ingested, CorpusError> {
    let mut out = Ingested::default();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let mut inst: NluInstance = serde_json::from_str(line)
            .map_err(|e| CorpusError::MalformedRecord { line_no, reason: e.to_string() })?;
        if inst.dataset.is_empty() {
            inst.dataset = desc.name.clone();
        }
        if inst.task != desc.task {
            return Err(CorpusError::SchemaMismatch(format!(
                "line {line_no}: instance task {} but dataset `{}` is {}",
                inst.task, desc.name, desc.task
            )));
        }
        if inst.template.is_none() {
            inst.template = desc.template.clone();
        }
        if let Gold::Mentions(ms) = &mut inst.gold {
            for m in ms.iter_mut() {
                if !m.resolve_offsets(&inst.source_text) {
                    return Err(CorpusError::MalformedRecord {
                        line_no,
                        reason: format!("mention `{}` does not occur in the source text", m.text),
                    });
                }
            }
        }
        out.instances.push(inst);
    }
    Ok(out)
}

/// Loads and validates one dataset.
pub fn ingest(desc: &DatasetDescriptor) -> Result<Ingested, CorpusError> {
    let token_task = desc.task.output_category() == OutputCategory::TokenClassification;
    let mut ingested = match desc.format {
        SourceFormat::ConllBio | SourceFormat::BratStandoff if !token_task => {
            return Err(CorpusError::SchemaMismatch(format!(
                "{:?} sources only hold token-classification data, dataset `{}` is {}",
                desc.format, desc.name, desc.task
            )))
        }
        SourceFormat::ConllBio => {
            let content = fs::read_to_string(&desc.path).map_err(io_err(&desc.path))?;
            parse_conll_bio(desc, &content)?
        }
        SourceFormat::BratStandoff => ingest_standoff(desc)?,
        SourceFormat::JsonlNative => {
            let content = fs::read_to_string(&desc.path).map_err(io_err(&desc.path))?;
            parse_jsonl_native(desc, &content)?
        }
    };
    let aliases = aliases_for(desc);
    for (n, inst) in ingested.instances.iter_mut().enumerate() {
        expand_instance_labels(inst, &aliases);
        let warnings = inst.validate().map_err(|e| CorpusError::MalformedRecord {
            line_no: n + 1,
            reason: format!("instance `{}`: {e}", inst.id),
        })?;
        ingested.warnings.extend(warnings);
    }
    Ok(ingested)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// Tokens ending in a period that never close a sentence (compared
/// lowercase, including the trailing period).
const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "prof.", "sr.", "jr.", "st.", "vs.", "v.", "e.g.", "i.e.",
    "cf.", "al.", "approx.", "fig.", "figs.", "no.", "nos.", "vol.", "inc.", "ltd.", "co.",
    "pt.", "pts.", "hx.", "dx.", "tx.", "rx.", "sx.", "fx.", "yo.", "y.o.", "b.i.d.", "t.i.d.",
    "q.i.d.", "q.d.", "q.h.s.", "h.s.", "p.o.", "p.r.n.", "prn.", "mg.", "ml.", "mcg.", "min.",
    "max.", "temp.", "resp.", "ca.", "dept.", "univ.", "jan.", "feb.", "mar.", "apr.", "jun.",
    "jul.", "aug.", "sep.", "sept.", "oct.", "nov.", "dec.",
];

fn is_guarded(token: &str) -> bool {
    let lower = token.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    // Single-letter initials such as "J."
    let mut chars = token.chars();
    matches!((chars.next(), chars.next(), chars.next()), (Some(c), Some('.'), None) if c.is_alphabetic())
}

/// Rule-based sentence segmentation. A sentence ends after `.`, `?` or `!`
/// (plus any closing quotes or brackets) when whitespace follows and the
/// next word starts with an uppercase letter or digit, unless the word
/// ending in `.` is a known abbreviation. Returned slices are trimmed;
/// only whitespace lies between them.
pub fn split_sentences(document: &str) -> Vec<SentenceSpan> {
    let chars: Vec<(usize, char)> = document.char_indices().collect();
    let n = chars.len();
    let mut bounds: Vec<(usize, usize)> = Vec::new(); // char index ranges
    let mut start = match chars.iter().position(|(_, c)| !c.is_whitespace()) {
        Some(s) => s,
        None => return Vec::new(),
    };
    let mut i = start;
    while i < n {
        let c = chars[i].1;
        if matches!(c, '.' | '?' | '!') {
            let mut end = i + 1;
            while end < n && matches!(chars[end].1, '.' | '?' | '!') {
                end += 1;
            }
            while end < n && matches!(chars[end].1, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}') {
                end += 1;
            }
            let mut next = end;
            while next < n && chars[next].1.is_whitespace() {
                next += 1;
            }
            let spaced = next > end;
            let opens = next < n && (chars[next].1.is_uppercase() || chars[next].1.is_ascii_digit());
            let guarded = c == '.' && {
                let mut w = i;
                while w > start && !chars[w - 1].1.is_whitespace() {
                    w -= 1;
                }
                let token: String = chars[w..end].iter().map(|(_, ch)| *ch).collect();
                let token = token.trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}']);
                is_guarded(token)
            };
            if spaced && opens && !guarded {
                bounds.push((start, end));
                start = next;
                i = next;
                continue;
            }
            i = end;
            continue;
        }
        i += 1;
    }
    let mut last = n;
    while last > start && chars[last - 1].1.is_whitespace() {
        last -= 1;
    }
    if last > start {
        bounds.push((start, last));
    }
    let byte = |ci: usize| if ci < n { chars[ci].0 } else { document.len() };
    bounds
        .into_iter()
        .map(|(s, e)| SentenceSpan {
            text: document[byte(s)..byte(e)].to_string(),
            char_start: s,
            char_end: e,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow<T> {
    pub before: Vec<T>,
    pub target: T,
    pub after: Vec<T>,
    /// Sentences exist beyond the window on this side.
    pub truncated_before: bool,
    pub truncated_after: bool,
}

/// Up to `k` items on each side of `sentences[index]`, cut at the edges.
pub fn context_window<T: Clone>(
    sentences: &[T],
    index: usize,
    k: usize,
) -> Result<ContextWindow<T>, CorpusError> {
    if index >= sentences.len() {
        return Err(CorpusError::IndexOutOfRange { index, len: sentences.len() });
    }
    let lo = index.saturating_sub(k);
    let hi = (index + 1 + k).min(sentences.len());
    Ok(ContextWindow {
        before: sentences[lo..index].to_vec(),
        target: sentences[index].clone(),
        after: sentences[index + 1..hi].to_vec(),
        truncated_before: lo > 0,
        truncated_after: hi < sentences.len(),
    })
}

impl<T: AsRef<str>> ContextWindow<T> {
    /// Context lists in instance form: a `...` entry marks a truncated edge.
    pub fn context_lists(&self) -> (Vec<String>, Vec<String>) {
        let mut before: Vec<String> = Vec::new();
        if self.truncated_before {
            before.push(ELLIPSIS.to_string());
        }
        before.extend(self.before.iter().map(|s| s.as_ref().to_string()));
        let mut after: Vec<String> = self.after.iter().map(|s| s.as_ref().to_string()).collect();
        if self.truncated_after {
            after.push(ELLIPSIS.to_string());
        }
        (before, after)
    }

    pub fn render(&self) -> String {
        let (b, a) = self.context_lists();
        prompt::window_text(Some(&b), self.target.as_ref(), Some(&a), usize::MAX)
    }
}

/// Trims an instance's context to `k` sentences per side, marking cuts.
pub fn apply_context_window(inst: &mut NluInstance, k: usize) {
    if inst.context_before.is_none() && inst.context_after.is_none() {
        return;
    }
    let split = |ctx: &Option<Vec<String>>| -> (Vec<String>, bool) {
        let ctx = ctx.as_deref().unwrap_or(&[]);
        let marked = ctx.iter().any(|s| s.trim() == ELLIPSIS);
        (ctx.iter().filter(|s| s.trim() != ELLIPSIS).cloned().collect(), marked)
    };
    let (before, b_marked) = split(&inst.context_before);
    let (after, a_marked) = split(&inst.context_after);
    let index = before.len();
    let mut sentences = before;
    sentences.push(inst.source_text.clone());
    sentences.extend(after);
    let mut w = context_window(&sentences, index, k).expect("target index is in range");
    w.truncated_before |= b_marked;
    w.truncated_after |= a_marked;
    let (b, a) = w.context_lists();
    inst.context_before = Some(b);
    inst.context_after = Some(a);
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Maximum summary length as a fraction of the input length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRatio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Default for OutputRatio {
    fn default() -> Self {
        Self { numerator: 1, denominator: 2 }
    }
}

pub const DEFAULT_MAX_INPUT_WORDS: usize = 800;

/// Length filter for summarization pairs: input strictly shorter than
/// `max_input_words`, and with `apply_ratio` a summary of at most
/// `max_output_ratio` times the input word count. Other tasks always pass.
pub fn filter_summarization(
    instance: &NluInstance,
    max_input_words: usize,
    max_output_ratio: OutputRatio,
    apply_ratio: bool,
) -> bool {
    if instance.task != TaskKind::Summarization {
        return true;
    }
    let input = word_count(&instance.source_text);
    if input >= max_input_words {
        return false;
    }
    if apply_ratio {
        let output = match &instance.gold {
            Gold::Text(t) => word_count(t),
            _ => 0,
        } as u64;
        if output * max_output_ratio.denominator > max_output_ratio.numerator * input as u64 {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    #[serde(default = "default_total")]
    pub total_instances: usize,
    #[serde(default)]
    pub tasks: Vec<TaskKind>,
    #[serde(default)]
    pub seed: u64,
    /// Recorded for the training run; sampling ignores it.
    #[serde(default = "default_epochs")]
    pub epochs_hint: u32,
}

fn default_total() -> usize {
    50_000
}

fn default_epochs() -> u32 {
    3
}

impl SamplingPlan {
    pub fn new(total_instances: usize, tasks: Vec<TaskKind>, seed: u64) -> Self {
        Self { total_instances, tasks, seed, epochs_hint: default_epochs() }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.total_instances == 0 {
            return Err(CorpusError::InvalidPlan("total_instances must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(CorpusError::InvalidPlan("no tasks".into()));
        }
        let distinct: BTreeSet<_> = self.tasks.iter().collect();
        if distinct.len() != self.tasks.len() {
            return Err(CorpusError::InvalidPlan("a task is listed twice".into()));
        }
        Ok(())
    }

    /// Equal shares; the first `total % tasks` tasks get one extra.
    pub fn quotas(&self) -> Vec<usize> {
        let n = self.tasks.len();
        let (base, rem) = (self.total_instances / n, self.total_instances % n);
        (0..n).map(|i| base + usize::from(i < rem)).collect()
    }
}

/// Draws as `(dataset index, instance index)` in output order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Draws {
    pub picks: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

/// Per-task budgeted sampling over pooled datasets. `pools[d]` is the task
/// and size of dataset `d`.
pub fn plan_draws(pools: &[(TaskKind, usize)], plan: &SamplingPlan) -> Result<Draws, CorpusError> {
    draw(pools, plan, &[])
}

/// As [`plan_draws`], except tasks in `skip` with an empty pool are left
/// out with a warning instead of failing the plan.
fn draw(pools: &[(TaskKind, usize)], plan: &SamplingPlan, skip: &[TaskKind]) -> Result<Draws, CorpusError> {
    plan.validate()?;
    let mut draws = Draws::default();
    for (task, quota) in plan.tasks.iter().zip(plan.quotas()) {
        let pool: Vec<(usize, usize)> = pools
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| t == task)
            .flat_map(|(d, (_, size))| (0..*size).map(move |i| (d, i)))
            .collect();
        if pool.is_empty() {
            if skip.contains(task) {
                draws.warnings.push(format!("task {task}: every dataset failed; its quota of {quota} is not drawn"));
                continue;
            }
            return Err(CorpusError::EmptyTaskPool(*task));
        }
        let mut rng = SplitMix64::new(derive_seed(plan.seed, &[b"sample", task.short_name().as_bytes()]));
        if pool.len() >= quota {
            draws
                .picks
                .extend(rng.sample_indices(pool.len(), quota).into_iter().map(|i| pool[i]));
        } else {
            // Every instance once, then the shortfall with replacement.
            draws
                .picks
                .extend(rng.sample_indices(pool.len(), pool.len()).into_iter().map(|i| pool[i]));
            for _ in pool.len()..quota {
                draws.picks.push(pool[rng.below(pool.len() as u64) as usize]);
            }
            draws.warnings.push(format!(
                "task {task}: pool of {} is smaller than its quota of {quota}; filled with replacement",
                pool.len()
            ));
        }
    }
    Ok(draws)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleOutcome {
    pub instances: Vec<NluInstance>,
    pub warnings: Vec<String>,
}

/// Equal-per-task sampling: instances of a task are pooled across its
/// datasets and drawn uniformly without replacement.
pub fn sample_budget(
    datasets: &[(DatasetDescriptor, Vec<NluInstance>)],
    plan: &SamplingPlan,
) -> Result<SampleOutcome, CorpusError> {
    let pools: Vec<(TaskKind, usize)> = datasets.iter().map(|(d, v)| (d.task, v.len())).collect();
    let draws = plan_draws(&pools, plan)?;
    Ok(SampleOutcome {
        instances: draws
            .picks
            .iter()
            .map(|&(d, i)| datasets[d].1[i].clone())
            .collect(),
        warnings: draws.warnings,
    })
}

/// Produces a short summary of a long document; see `summarize_type`.
pub trait Summarizer: Sync {
    fn summarize(&self, note: &str, type_label: &str) -> Result<String, String>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    #[serde(default)]
    pub plan: Option<SamplingPlan>,
    #[serde(default)]
    pub render: RenderOptions,
    /// Restrict to datasets from these domains.
    #[serde(default)]
    pub domains: Option<Vec<Domain>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStatus {
    Ok,
    Failed,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub task: TaskKind,
    pub domain: Domain,
    pub format: SourceFormat,
    pub split: Split,
    pub path: PathBuf,
    pub status: DatasetStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub ingested: usize,
    pub filtered: usize,
    pub filter_reasons: BTreeMap<String, usize>,
    pub unsampled: usize,
    /// Distinct instances emitted.
    pub emitted: usize,
    /// Extra copies drawn when a pool was smaller than its quota.
    pub duplicates: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub render: RenderOptions,
    pub plan: Option<SamplingPlan>,
    pub domains: Option<Vec<Domain>>,
    pub datasets: Vec<DatasetEntry>,
    pub per_task: BTreeMap<String, usize>,
    pub per_domain: BTreeMap<String, usize>,
    pub total_pairs: usize,
    pub failed_datasets: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOutput {
    pub pairs: Vec<PromptPair>,
    pub manifest: CorpusManifest,
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Biomedical => "biomedical",
        Domain::Clinical => "clinical",
        Domain::General => "general",
    }
}

struct Prepared {
    entry: DatasetEntry,
    /// Rendered pairs of instances that survived preprocessing.
    pairs: Vec<PromptPair>,
}

fn prepare(
    desc: &DatasetDescriptor,
    opts: &BuildOptions,
    summarizer: Option<&dyn Summarizer>,
) -> Prepared {
    let mut entry = DatasetEntry {
        name: desc.name.clone(),
        task: desc.task,
        domain: desc.domain,
        format: desc.format,
        split: desc.split,
        path: desc.path.clone(),
        status: DatasetStatus::Ok,
        error: None,
        ingested: 0,
        filtered: 0,
        filter_reasons: BTreeMap::new(),
        unsampled: 0,
        emitted: 0,
        duplicates: 0,
        warnings: Vec::new(),
    };
    let fail = |mut entry: DatasetEntry, msg: String| {
        entry.status = DatasetStatus::Failed;
        entry.error = Some(msg);
        Prepared { entry, pairs: Vec::new() }
    };
    if let Some(domains) = &opts.domains {
        if !domains.contains(&desc.domain) {
            entry.status = DatasetStatus::Excluded;
            return Prepared { entry, pairs: Vec::new() };
        }
    }
    let ingested = match ingest(desc) {
        Ok(i) => i,
        Err(e) => return fail(entry, e.to_string()),
    };
    entry.ingested = ingested.instances.len();
    entry.warnings = ingested.warnings;

    let mut pairs = Vec::new();
    for mut inst in ingested.instances {
        if let Some(kind) = &desc.summarize_type {
            let Some(s) = summarizer else {
                return fail(entry, "summarize_type is set but no inference endpoint is configured".into());
            };
            match s.summarize(&inst.source_text, kind) {
                Ok(summary) => inst.source_text = summary,
                Err(e) => return fail(entry, CorpusError::Summarization(e).to_string()),
            }
        }
        apply_context_window(&mut inst, opts.render.context_sentences);
        if let Some(max) = desc.max_input_words {
            if !filter_summarization(&inst, max, OutputRatio::default(), desc.output_ratio_filter) {
                entry.filtered += 1;
                *entry.filter_reasons.entry("length".into()).or_default() += 1;
                continue;
            }
        }
        match prompt::render(&inst, &opts.render) {
            Ok(r) => pairs.push(r.pair),
            Err(e) => {
                entry.filtered += 1;
                *entry.filter_reasons.entry("render_error".into()).or_default() += 1;
                entry.warnings.push(format!("{}: {e}", inst.id));
            }
        }
    }
    Prepared { entry, pairs }
}

/// Ingest → preprocess → optional budgeted sampling → render.
pub fn build_corpus(
    descs: &[DatasetDescriptor],
    opts: &BuildOptions,
    summarizer: Option<&dyn Summarizer>,
) -> Result<CorpusOutput, CorpusError> {
    // Ingestion is independent per dataset; collect keeps descriptor order.
    let mut prepared: Vec<Prepared> = if descs.iter().any(|d| d.summarize_type.is_some()) {
        descs.iter().map(|d| prepare(d, opts, summarizer)).collect()
    } else {
        descs.par_iter().map(|d| prepare(d, opts, None)).collect()
    };

    let mut warnings = Vec::new();
    let picks: Vec<(usize, usize)> = match &opts.plan {
        Some(plan) => {
            let pools: Vec<(TaskKind, usize)> =
                prepared.iter().map(|p| (p.entry.task, p.pairs.len())).collect();
            let failed_only: Vec<TaskKind> = plan
                .tasks
                .iter()
                .copied()
                .filter(|t| {
                    let mut of_task = prepared.iter().filter(|p| p.entry.task == *t).peekable();
                    of_task.peek().is_some() && of_task.all(|p| p.entry.status == DatasetStatus::Failed)
                })
                .collect();
            let draws = draw(&pools, plan, &failed_only)?;
            warnings = draws.warnings;
            draws.picks
        }
        None => prepared
            .iter()
            .enumerate()
            .flat_map(|(d, p)| (0..p.pairs.len()).map(move |i| (d, i)))
            .collect(),
    };

    let mut seen: Vec<Vec<bool>> = prepared.iter().map(|p| vec![false; p.pairs.len()]).collect();
    let mut per_task: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_domain: BTreeMap<String, usize> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(picks.len());
    for (d, i) in picks {
        let p = &mut prepared[d];
        if std::mem::replace(&mut seen[d][i], true) {
            p.entry.duplicates += 1;
        } else {
            p.entry.emitted += 1;
        }
        *per_task.entry(p.entry.task.short_name().to_string()).or_default() += 1;
        *per_domain.entry(domain_name(p.entry.domain).to_string()).or_default() += 1;
        pairs.push(p.pairs[i].clone());
    }
    let datasets: Vec<DatasetEntry> = prepared
        .into_iter()
        .map(|mut p| {
            p.entry.unsampled = p.pairs.len() - p.entry.emitted;
            p.entry
        })
        .collect();
    let failed_datasets = datasets.iter().filter(|d| d.status == DatasetStatus::Failed).count();
    Ok(CorpusOutput {
        manifest: CorpusManifest {
            render: opts.render.clone(),
            plan: opts.plan.clone(),
            domains: opts.domains.clone(),
            total_pairs: pairs.len(),
            datasets,
            per_task,
            per_domain,
            failed_datasets,
            warnings,
        },
        pairs,
    })
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_instances_jsonl(path: &Path) -> Result<Vec<NluInstance>, CorpusError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: NluInstance = serde_json::from_str(line)
            .map_err(|e| CorpusError::MalformedRecord { line_no: i + 1, reason: e.to_string() })?;
        inst.validate().map_err(|e| CorpusError::MalformedRecord {
            line_no: i + 1,
            reason: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

/// Corpus plan file (TOML):
///
/// ```toml
/// seed = 7                 # default for render.seed and plan.seed
/// domains = ["clinical"]   # optional filter
///
/// [render]
/// shuffle_labels = true
/// context_sentences = 2
/// negative_category_count = 12
///
/// [plan]                   # optional: equal-per-task budget
/// total_instances = 50000
/// tasks = ["NER", "RE"]    # default: every task in [[dataset]], in order
///
/// [[dataset]]
/// name = "n2c2"
/// task = "NER"
/// domain = "clinical"
/// format = "brat_standoff"
/// path = "data/n2c2"       # relative to the config file
/// split = "train"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub domains: Option<Vec<Domain>>,
    #[serde(default)]
    pub render: Option<RenderSection>,
    #[serde(default)]
    pub plan: Option<PlanSection>,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<DatasetDescriptor>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSection {
    pub seed: Option<u64>,
    pub shuffle_labels: Option<bool>,
    pub context_sentences: Option<usize>,
    pub negative_category_count: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub total_instances: Option<usize>,
    pub tasks: Option<Vec<TaskKind>>,
    pub seed: Option<u64>,
    pub epochs_hint: Option<u32>,
}

impl CorpusConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, CorpusError> {
        toml::from_str(s).map_err(|e| CorpusError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for d in cfg.datasets.iter_mut() {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        Ok(cfg)
    }

    /// Distinct dataset tasks in first-appearance order.
    pub fn dataset_tasks(&self) -> Vec<TaskKind> {
        let mut tasks = Vec::new();
        for d in &self.datasets {
            if !tasks.contains(&d.task) {
                tasks.push(d.task);
            }
        }
        tasks
    }

    /// Effective build options. Labels are shuffled unless disabled.
    pub fn build_options(&self) -> BuildOptions {
        let seed = self.seed.unwrap_or(0);
        let r = self.render.clone().unwrap_or_default();
        let defaults = RenderOptions::default();
        let render = RenderOptions {
            seed: r.seed.unwrap_or(seed),
            shuffle_labels: r.shuffle_labels.unwrap_or(true),
            context_sentences: r.context_sentences.unwrap_or(defaults.context_sentences),
            negative_category_count: r
                .negative_category_count
                .unwrap_or(defaults.negative_category_count),
        };
        let plan = self.plan.as_ref().map(|p| SamplingPlan {
            total_instances: p.total_instances.unwrap_or_else(default_total),
            tasks: p.tasks.clone().unwrap_or_else(|| self.dataset_tasks()),
            seed: p.seed.unwrap_or(seed),
            epochs_hint: p.epochs_hint.unwrap_or_else(default_epochs),
        });
        BuildOptions { plan, render, domains: self.domains.clone() }
    }
}
