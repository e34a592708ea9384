//! Rendering instances into instruction prompts and gold completions.
//!
//! Token-classification outputs carry one line per label, `Label: span ... span`
//! or `Label: None`. Choice outputs reproduce the gold option tokens, e.g.
//! `(A) Insufficient enrollment (C) Business administrative`. STS is rendered
//! as a single-answer choice over a descriptive similarity scale.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, instance_seed, SplitMix64};
use crate::types::{
    Canonical, ChoiceSet, EntityMention, Gold, LabelSet, NluInstance, OutputCategory, PromptPair,
    TaskKind, ValidationError,
};

/// Separator between spans on one output line.
pub const SPAN_SEPARATOR: &str = " ... ";
/// Payload of a label line with no spans.
pub const NONE_PAYLOAD: &str = "None";
/// Context entry marking elided text.
pub const ELLIPSIS: &str = "...";

const NER_FEWSHOT_PREAMBLE: &str = "Your answer should use the following format, with one entity type per line. The span refers to the original text span from the Medical text. Output None if there is no such span. Use `...' to separate multiple spans.";

/// Output-format explanation prepended to few-shot NER prompts.
pub fn ner_fewshot_preamble() -> &'static str {
    NER_FEWSHOT_PREAMBLE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Global seed; each instance derives its own stream from it.
    pub seed: u64,
    pub shuffle_labels: bool,
    /// Sentences of context kept on each side for RE, EAE and EAC.
    pub context_sentences: usize,
    /// Negatives kept next to the gold category for large single-label DC sets.
    pub negative_category_count: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            shuffle_labels: false,
            context_sentences: 2,
            negative_category_count: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("gold mention label `{0}` is not in the label set")]
    UnknownGoldLabel(String),
    #[error("gold answer `{0}` is not among the choices")]
    GoldNotInChoices(String),
    #[error("score {0} is outside the similarity scale")]
    ScoreOutOfScale(i64),
    #[error("span `{0}` contains the span separator")]
    SeparatorCollision(String),
    #[error("span `{0}` cannot be written on an output line")]
    InvalidSpan(String),
    #[error("{task} cannot be rendered as {expected}")]
    WrongTask { task: TaskKind, expected: &'static str },
    #[error("asked for {wanted} negatives but only {available} are available")]
    PoolTooSmall { wanted: usize, available: usize },
    #[error("template placeholder `{{{0}}}` is unknown")]
    UnknownPlaceholder(String),
    #[error("template needs `{0}` but the instance has none")]
    MissingField(String),
    #[error("invalid similarity scale: {0}")]
    InvalidScale(String),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// Descriptive phrases standing for integer similarity scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StsScale {
    pub entries: Vec<(i64, String)>,
}

impl Default for StsScale {
    fn default() -> Self {
        let phrases = [
            "The two sentences are completely dissimilar.",
            "The two sentences are not equivalent, but are on the same topic.",
            "The two sentences are not equivalent, but share some details",
            "The two sentences are roughly equivalent, but some important information differs / missing.",
            "The two sentences are mostly equivalent, but some unimportant details differ.",
            "The two sentences are completely or mostly equivalent, as they mean the same thing.",
        ];
        Self {
            entries: phrases
                .iter()
                .enumerate()
                .map(|(i, p)| (i as i64, (*p).to_string()))
                .collect(),
        }
    }
}

impl StsScale {
    pub fn new(entries: Vec<(i64, String)>) -> Result<Self, PromptError> {
        let scale = Self { entries };
        scale.validate()?;
        Ok(scale)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.entries.is_empty() {
            return Err(PromptError::InvalidScale("empty".into()));
        }
        if self.entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(PromptError::InvalidScale("scores must strictly increase".into()));
        }
        let phrases: BTreeSet<_> = self.entries.iter().map(|(_, p)| p).collect();
        if phrases.len() != self.entries.len() {
            return Err(PromptError::InvalidScale("phrases must be unique".into()));
        }
        Ok(())
    }

    pub fn from_choices(choices: &ChoiceSet) -> Result<Self, PromptError> {
        let mut entries = choices
            .options
            .iter()
            .map(|o| match o.canonical {
                Canonical::Score(s) => Ok((s, o.description.clone())),
                Canonical::Label(_) => {
                    Err(PromptError::InvalidScale("choice without a score".into()))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        entries.sort_by_key(|(s, _)| *s);
        Self::new(entries)
    }

    pub fn contains(&self, score: i64) -> bool {
        self.entries.iter().any(|(s, _)| *s == score)
    }

    pub fn to_choices(&self) -> Result<ChoiceSet, PromptError> {
        Ok(ChoiceSet::new(
            self.entries
                .iter()
                .map(|(s, p)| (p.clone(), Canonical::Score(*s))),
            false,
        )?)
    }
}

/// How the rendered prompt presented its labels; needed to read a
/// completion back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Tokens {
        labels: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event: Option<String>,
    },
    Choices {
        choices: ChoiceSet,
    },
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub pair: PromptPair,
    pub layout: Layout,
}

/// Fisher-Yates permutation driven by SplitMix64 seeded with `seed`.
pub fn shuffle_choice_order<T: Clone>(labels: &[T], seed: u64) -> Vec<T> {
    let mut out = labels.to_vec();
    SplitMix64::new(seed).shuffle(&mut out);
    out
}

/// `gold` plus `n` negatives drawn uniformly without replacement from
/// `pool \ gold`. The result keeps pool order.
pub fn sample_negative_categories(
    gold: &[String],
    pool: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<String>, PromptError> {
    for g in gold {
        if !pool.contains(g) {
            return Err(PromptError::GoldNotInChoices(g.clone()));
        }
    }
    let negatives: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, l)| !gold.contains(l))
        .map(|(i, _)| i)
        .collect();
    if n > negatives.len() {
        return Err(PromptError::PoolTooSmall { wanted: n, available: negatives.len() });
    }
    let picked: BTreeSet<usize> = SplitMix64::new(seed)
        .sample_indices(negatives.len(), n)
        .into_iter()
        .map(|i| negatives[i])
        .collect();
    Ok(pool
        .iter()
        .enumerate()
        .filter(|(i, l)| gold.contains(l) || picked.contains(i))
        .map(|(_, l)| l.clone())
        .collect())
}

pub fn expand_label_name(raw: &str, aliases: &BTreeMap<String, String>) -> String {
    aliases.get(raw).cloned().unwrap_or_else(|| raw.to_string())
}

/// Built-in expansions for abbreviated label names.
pub fn default_label_aliases() -> BTreeMap<String, String> {
    BTreeMap::from([(
        "GENERIF".to_string(),
        "Gene reference into a function (function of a gene)".to_string(),
    )])
}

pub fn default_template(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Ner | TaskKind::EventTriggerExtraction => {
            "Extract all relevant medical named entities faithfully from the medical text below. Focus on identifying the following entities: {labels}.\n\nMedical text: {text}"
        }
        TaskKind::EventArgumentExtraction => {
            "According to the medical text, what is the {labels} attribute of the {event} event `{trigger}' in the medical text below? Extract the attribute faithfully from the medical text.\n\nMedical text: {text}"
        }
        TaskKind::EventArgumentClassification => {
            "According to the medical text, what is the {target} attribute of the {event} event `{trigger}' in the medical text below? Choose from the following options.\n\nMedical text: {text}\n\nOptions: {options}"
        }
        TaskKind::DocumentClassification => {
            "According to the medical text below, which options best describe {target}? Choose from the following options. {choice_hint}\n\nMedical text: {text}\n\nOptions: {options}"
        }
        TaskKind::RelationExtraction => {
            "According to the Medical text below, what is the {relation} between the {head_label} entity `{head}' and the {tail_label} entity `{tail}'? Choose from the following options.\n\nMedical text: {text}\n\nOptions: {options}"
        }
        TaskKind::Qa => {
            "According to the medical literature below, {question} Choose from the following options. {choice_hint}\n\nMedical literature: {text}\n\nOptions: {options}"
        }
        TaskKind::Nli => {
            "What is the relationship of the hypothesis with respect to the premise? Choose from the following options.\n\nPremise: {premise}\n\nHypothesis: {hypothesis}\n\nOptions: {options}"
        }
        TaskKind::Sts => {
            "How similar are the two sentences below? Choose from the following options.\n\nSentence 1: {premise}\n\nSentence 2: {hypothesis}\n\nOptions: {options}"
        }
        TaskKind::Summarization => "Summarize the following medical text.\n\nMedical text: {text}",
    }
}

type Vars = Vec<(&'static str, Option<String>)>;

/// Single-pass `{name}` substitution; `{{` and `}}` are literal braces.
fn fill_template(template: &str, vars: &Vars) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(r) = tail.strip_prefix("{{") {
            out.push('{');
            rest = r;
        } else if let Some(r) = tail.strip_prefix("}}") {
            out.push('}');
            rest = r;
        } else if let Some(r) = tail.strip_prefix('}') {
            out.push('}');
            rest = r;
        } else {
            let close = tail
                .find('}')
                .ok_or_else(|| PromptError::UnknownPlaceholder(tail.to_string()))?;
            let name = &tail[1..close];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?
                .1
                .as_ref()
                .ok_or_else(|| PromptError::MissingField(name.to_string()))?;
            out.push_str(value);
            rest = &tail[close + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Joins up to `k` context sentences on each side of `target`, marking
/// elided edges with `...`.
pub fn window_text(
    before: Option<&[String]>,
    target: &str,
    after: Option<&[String]>,
    k: usize,
) -> String {
    fn side(ctx: Option<&[String]>) -> (Vec<&str>, bool) {
        let ctx = ctx.unwrap_or(&[]);
        let marked = ctx.iter().any(|s| s.trim() == ELLIPSIS);
        let sents: Vec<&str> = ctx
            .iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty() && *s != ELLIPSIS)
            .collect();
        (sents, marked)
    }
    let (b, b_marked) = side(before);
    let (a, a_marked) = side(after);
    let b_keep = &b[b.len().saturating_sub(k)..];
    let a_keep = &a[..a.len().min(k)];
    let mut parts: Vec<&str> = Vec::new();
    if b_marked || b_keep.len() < b.len() {
        parts.push(ELLIPSIS);
    }
    parts.extend_from_slice(b_keep);
    parts.push(target);
    parts.extend_from_slice(a_keep);
    if a_marked || a_keep.len() < a.len() {
        parts.push(ELLIPSIS);
    }
    parts.join(" ")
}

fn body_text(instance: &NluInstance, opts: &RenderOptions) -> String {
    match instance.task {
        TaskKind::RelationExtraction
        | TaskKind::EventArgumentExtraction
        | TaskKind::EventArgumentClassification => window_text(
            instance.context_before.as_deref(),
            &instance.source_text,
            instance.context_after.as_deref(),
            opts.context_sentences,
        ),
        _ => instance.source_text.clone(),
    }
}

fn base_vars(instance: &NluInstance, opts: &RenderOptions) -> Vars {
    let (head, tail) = match &instance.entity_pair {
        Some((h, t)) => (Some(h), Some(t)),
        None => (None, None),
    };
    let relation = match &instance.target {
        Some(t) => format!("{t} relationship"),
        None => "relationship".to_string(),
    };
    vec![
        ("text", Some(body_text(instance, opts))),
        ("question", instance.question.clone()),
        ("premise", instance.premise.clone()),
        ("hypothesis", instance.hypothesis.clone()),
        ("event", instance.trigger.as_ref().map(|t| t.label.clone())),
        ("trigger", instance.trigger.as_ref().map(|t| t.text.clone())),
        ("target", instance.target.clone()),
        ("relation", Some(relation)),
        ("head", head.map(|m| m.text.clone())),
        ("head_label", head.map(|m| m.label.clone())),
        ("tail", tail.map(|m| m.text.clone())),
        ("tail_label", tail.map(|m| m.label.clone())),
    ]
}

fn template_of(instance: &NluInstance) -> &str {
    instance
        .template
        .as_deref()
        .unwrap_or_else(|| default_template(instance.task))
}

fn stream_seed(opts: &RenderOptions, instance: &NluInstance, purpose: &str) -> u64 {
    derive_seed(
        instance_seed(opts.seed, &instance.dataset, &instance.id),
        &[purpose.as_bytes()],
    )
}

fn check_span(text: &str) -> Result<(), PromptError> {
    if format!(" {text} ").contains(SPAN_SEPARATOR) {
        return Err(PromptError::SeparatorCollision(text.to_string()));
    }
    if text.is_empty()
        || text.trim() != text
        || text.contains(['\n', '\r'])
        || text.eq_ignore_ascii_case(NONE_PAYLOAD)
    {
        return Err(PromptError::InvalidSpan(text.to_string()));
    }
    Ok(())
}

/// One output line per label; spans in source order joined by ` ... `.
pub fn render_token_classification(
    instance: &NluInstance,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, PromptError> {
    if instance.category() != OutputCategory::TokenClassification {
        return Err(PromptError::WrongTask {
            task: instance.task,
            expected: "token classification",
        });
    }
    let labels = instance
        .label_set
        .labels()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| ValidationError::BadLabelSet("token tasks need a label list".into()))?;
    let mentions = match &instance.gold {
        Gold::Mentions(m) => m,
        _ => return Err(ValidationError::GoldMismatch("expected mentions".into()).into()),
    };
    for m in mentions {
        if !labels.contains(&m.label) {
            return Err(PromptError::UnknownGoldLabel(m.label.clone()));
        }
        check_span(&m.text)?;
    }
    let labels = if opts.shuffle_labels {
        shuffle_choice_order(labels, stream_seed(opts, instance, "labels"))
    } else {
        labels.to_vec()
    };

    let event = match instance.task {
        TaskKind::EventArgumentExtraction => Some(
            instance
                .trigger
                .as_ref()
                .ok_or(ValidationError::MissingField("trigger"))?
                .label
                .clone(),
        ),
        _ => None,
    };

    let mut ordered: Vec<&EntityMention> = mentions.iter().collect();
    // Stable: mentions without offsets keep their listed order.
    ordered.sort_by_key(|m| m.char_start.unwrap_or(usize::MAX));
    let lines: Vec<String> = labels
        .iter()
        .map(|label| {
            let spans: Vec<&str> = ordered
                .iter()
                .filter(|m| &m.label == label)
                .map(|m| m.text.as_str())
                .collect();
            let payload = if spans.is_empty() {
                NONE_PAYLOAD.to_string()
            } else {
                spans.join(SPAN_SEPARATOR)
            };
            match &event {
                Some(ev) => format!("{ev} - {label}: {payload}"),
                None => format!("{label}: {payload}"),
            }
        })
        .collect();

    let mut vars = base_vars(instance, opts);
    vars.push(("labels", Some(labels.join(", "))));
    let input = fill_template(template_of(instance), &vars)?;
    Ok(RenderedPrompt {
        pair: PromptPair {
            instance_id: instance.id.clone(),
            input,
            output: lines.join("\n"),
        },
        layout: Layout::Tokens { labels, event },
    })
}

fn option_tokens(choices: &ChoiceSet) -> String {
    choices
        .options
        .iter()
        .map(|o| format!("({}) {}", o.letter, o.description))
        .collect::<Vec<_>>()
        .join(" ")
}

fn choice_hint(multi_select: bool) -> &'static str {
    if multi_select {
        "Multiple options can be true."
    } else {
        "Only one option can be true."
    }
}

/// Re-letters `entries` after an optional seeded shuffle.
fn present(
    entries: Vec<(String, Canonical)>,
    multi_select: bool,
    instance: &NluInstance,
    opts: &RenderOptions,
) -> Result<ChoiceSet, PromptError> {
    let entries = if opts.shuffle_labels {
        shuffle_choice_order(&entries, stream_seed(opts, instance, "choices"))
    } else {
        entries
    };
    Ok(ChoiceSet::new(entries, multi_select)?)
}

fn gold_output(
    presented: &ChoiceSet,
    gold: &[Canonical],
    prefix: Option<String>,
) -> Result<String, PromptError> {
    let mut letters = Vec::with_capacity(gold.len());
    for g in gold {
        letters.push(
            presented
                .letter_of(g)
                .ok_or_else(|| PromptError::GoldNotInChoices(g.to_string()))?,
        );
    }
    letters.sort_unstable();
    let body = if letters.is_empty() {
        NONE_PAYLOAD.to_string()
    } else {
        letters
            .iter()
            .map(|l| {
                let o = presented.get(*l).expect("letter taken from the set");
                format!("({}) {}", o.letter, o.description)
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(match prefix {
        Some(p) => format!("{p}{body}"),
        None => body,
    })
}

/// Lettered options in the input; gold option tokens as the output.
pub fn render_sequence_classification(
    instance: &NluInstance,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, PromptError> {
    if instance.category() != OutputCategory::SequenceClassification {
        return Err(PromptError::WrongTask {
            task: instance.task,
            expected: "sequence classification",
        });
    }
    let (pool, multi_select): (Vec<(String, Canonical)>, bool) = match &instance.label_set {
        LabelSet::Choices(c) => (
            c.options
                .iter()
                .map(|o| (o.description.clone(), o.canonical.clone()))
                .collect(),
            c.multi_select,
        ),
        LabelSet::Labels(l) => (
            l.iter().map(|x| (x.clone(), Canonical::Label(x.clone()))).collect(),
            false,
        ),
    };
    if pool.is_empty() {
        return Err(ValidationError::BadLabelSet("empty choice set".into()).into());
    }
    let gold: Vec<Canonical> = match &instance.gold {
        Gold::Letters(letters) => {
            let c = instance.label_set.choices().ok_or_else(|| {
                ValidationError::BadLabelSet("letter gold needs a choice set".into())
            })?;
            letters
                .iter()
                .map(|l| {
                    c.get(*l)
                        .map(|o| o.canonical.clone())
                        .ok_or_else(|| PromptError::GoldNotInChoices(format!("({l})")))
                })
                .collect::<Result<_, _>>()?
        }
        Gold::Labels(names) => names.iter().cloned().map(Canonical::Label).collect(),
        _ => return Err(ValidationError::GoldMismatch("expected letters or labels".into()).into()),
    };

    let n = opts.negative_category_count;
    let pool = if instance.task == TaskKind::DocumentClassification
        && !multi_select
        && pool.len() > gold.len() + n
    {
        let key = |c: &Canonical| c.to_string();
        let names: Vec<String> = pool.iter().map(|(_, c)| key(c)).collect();
        let gold_names: Vec<String> = gold.iter().map(key).collect();
        let kept = sample_negative_categories(
            &gold_names,
            &names,
            n,
            stream_seed(opts, instance, "negatives"),
        )?;
        pool.into_iter().filter(|(_, c)| kept.contains(&key(c))).collect()
    } else {
        pool
    };

    let presented = present(pool, multi_select, instance, opts)?;
    let prefix = match instance.task {
        TaskKind::EventArgumentClassification => {
            let trig = instance.trigger.as_ref().ok_or(ValidationError::MissingField("trigger"))?;
            let role = instance.target.as_ref().ok_or(ValidationError::MissingField("target"))?;
            Some(format!("{} - {}: ", trig.label, role))
        }
        _ => None,
    };
    let output = gold_output(&presented, &gold, prefix)?;

    let mut vars = base_vars(instance, opts);
    if instance.task == TaskKind::DocumentClassification && instance.target.is_none() {
        vars.retain(|(k, _)| *k != "target");
        vars.push(("target", Some("the medical text".into())));
    }
    vars.push(("options", Some(option_tokens(&presented))));
    vars.push(("choice_hint", Some(choice_hint(multi_select).into())));
    let input = fill_template(template_of(instance), &vars)?;
    Ok(RenderedPrompt {
        pair: PromptPair { instance_id: instance.id.clone(), input, output },
        layout: Layout::Choices { choices: presented },
    })
}

/// STS as an ordinal single-answer choice over `scale`.
pub fn render_sts(
    instance: &NluInstance,
    scale: &StsScale,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, PromptError> {
    if instance.task != TaskKind::Sts {
        return Err(PromptError::WrongTask { task: instance.task, expected: "STS" });
    }
    scale.validate()?;
    let score = match instance.gold {
        Gold::Score(s) => s,
        _ => return Err(ValidationError::GoldMismatch("expected a score".into()).into()),
    };
    if !scale.contains(score) {
        return Err(PromptError::ScoreOutOfScale(score));
    }
    let entries = scale
        .entries
        .iter()
        .map(|(s, p)| (p.clone(), Canonical::Score(*s)))
        .collect();
    let presented = present(entries, false, instance, opts)?;
    let output = gold_output(&presented, &[Canonical::Score(score)], None)?;
    let mut vars = base_vars(instance, opts);
    vars.push(("options", Some(option_tokens(&presented))));
    vars.push(("choice_hint", Some(choice_hint(false).into())));
    let input = fill_template(template_of(instance), &vars)?;
    Ok(RenderedPrompt {
        pair: PromptPair { instance_id: instance.id.clone(), input, output },
        layout: Layout::Choices { choices: presented },
    })
}

fn render_generation(
    instance: &NluInstance,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, PromptError> {
    let output = match &instance.gold {
        Gold::Text(t) => t.clone(),
        _ => return Err(ValidationError::GoldMismatch("expected text".into()).into()),
    };
    let input = fill_template(template_of(instance), &base_vars(instance, opts))?;
    Ok(RenderedPrompt {
        pair: PromptPair { instance_id: instance.id.clone(), input, output },
        layout: Layout::Text,
    })
}

/// Renders any instance with the renderer for its output category.
pub fn render(instance: &NluInstance, opts: &RenderOptions) -> Result<RenderedPrompt, PromptError> {
    match instance.category() {
        OutputCategory::TokenClassification => render_token_classification(instance, opts),
        OutputCategory::SequenceClassification => render_sequence_classification(instance, opts),
        OutputCategory::SequenceRegression => {
            let scale = match instance.label_set.choices() {
                Some(c) => StsScale::from_choices(c)?,
                None => StsScale::default(),
            };
            render_sts(instance, &scale, opts)
        }
        OutputCategory::Generation => render_generation(instance, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ChoiceOption;

    fn blank(task: TaskKind) -> NluInstance {
        NluInstance {
            id: "i1".into(),
            dataset: "ds".into(),
            task,
            source_text: String::new(),
            context_before: None,
            context_after: None,
            label_set: LabelSet::default(),
            gold: Gold::Mentions(vec![]),
            question: None,
            premise: None,
            hypothesis: None,
            trigger: None,
            entity_pair: None,
            target: None,
            template: None,
        }
    }

    fn ner(text: &str, labels: &[&str], gold: Vec<EntityMention>) -> NluInstance {
        NluInstance {
            source_text: text.into(),
            label_set: LabelSet::Labels(labels.iter().map(|s| s.to_string()).collect()),
            gold: Gold::Mentions(gold),
            ..blank(TaskKind::Ner)
        }
    }

    #[test]
    fn ner_lines_follow_label_order() {
        let text = "Denies any IV drug use or any recreational drug use.";
        let inst = ner(
            text,
            &["Living status", "Tobacco", "Drug", "Employment", "Alcohol"],
            vec![
                EntityMention::new("Drug", "IV drug use").with_offsets(11, 22),
                EntityMention::new("Drug", "recreational drug use").with_offsets(30, 51),
            ],
        );
        let r = render(&inst, &RenderOptions::default()).unwrap();
        assert_eq!(
            r.pair.output,
            "Living status: None\nTobacco: None\nDrug: IV drug use ... recreational drug use\nEmployment: None\nAlcohol: None"
        );
    }

    #[test]
    fn empty_gold_renders_none() {
        let r = render(&ner("x", &["Drug"], vec![]), &RenderOptions::default()).unwrap();
        assert_eq!(r.pair.output, "Drug: None");
    }

    #[test]
    fn repeated_text_listed_in_source_order() {
        let inst = ner(
            "aspirin and later aspirin",
            &["Drug"],
            vec![
                EntityMention::new("Drug", "aspirin").with_offsets(18, 25),
                EntityMention::new("Drug", "aspirin").with_offsets(0, 7),
            ],
        );
        let r = render(&inst, &RenderOptions::default()).unwrap();
        assert_eq!(r.pair.output, "Drug: aspirin ... aspirin");
    }

    #[test]
    fn token_errors() {
        let unknown = ner("x", &["Drug"], vec![EntityMention::new("Alcohol", "x")]);
        assert_eq!(
            render(&unknown, &RenderOptions::default()).unwrap_err(),
            PromptError::UnknownGoldLabel("Alcohol".into())
        );
        let collide = ner("a ... b", &["Drug"], vec![EntityMention::new("Drug", "a ... b")]);
        assert!(matches!(
            render(&collide, &RenderOptions::default()),
            Err(PromptError::SeparatorCollision(_))
        ));
        let dots = ner("...", &["Drug"], vec![EntityMention::new("Drug", "...")]);
        assert!(matches!(
            render(&dots, &RenderOptions::default()),
            Err(PromptError::SeparatorCollision(_))
        ));
    }

    #[test]
    fn shuffled_labels_keep_one_line_each() {
        let inst = ner("x", &["A", "B", "C", "D"], vec![EntityMention::new("C", "x")]);
        let opts = RenderOptions { shuffle_labels: true, seed: 9, ..Default::default() };
        let r = render(&inst, &opts).unwrap();
        assert_eq!(r.pair.output.lines().count(), 4);
        let Layout::Tokens { labels, .. } = &r.layout else { panic!() };
        let heads: Vec<&str> = r.pair.output.lines().map(|l| l.split(':').next().unwrap()).collect();
        assert_eq!(heads, labels.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(r.pair.input.contains(&labels.join(", ")));
        assert_eq!(render(&inst, &opts).unwrap(), r);
    }

    #[test]
    fn nli_output_letter() {
        let inst = NluInstance {
            premise: Some("p".into()),
            hypothesis: Some("h".into()),
            label_set: LabelSet::Choices(
                ChoiceSet::from_labels(["neutral", "entailment", "contradiction"], false).unwrap(),
            ),
            gold: Gold::Letters(vec!['C']),
            ..blank(TaskKind::Nli)
        };
        let r = render(&inst, &RenderOptions::default()).unwrap();
        assert_eq!(r.pair.output, "(C) contradiction");
        assert!(r.pair.input.ends_with("Options: (A) neutral (B) entailment (C) contradiction"));
    }

    #[test]
    fn gold_letter_past_the_set() {
        let mut inst = NluInstance {
            premise: Some("p".into()),
            hypothesis: Some("h".into()),
            label_set: LabelSet::Choices(ChoiceSet::from_labels(["a", "b"], false).unwrap()),
            gold: Gold::Letters(vec!['D']),
            ..blank(TaskKind::Nli)
        };
        assert!(matches!(
            render(&inst, &RenderOptions::default()),
            Err(PromptError::GoldNotInChoices(_))
        ));
        inst.gold = Gold::Letters(vec!['B']);
        assert!(render(&inst, &RenderOptions::default()).is_ok());
    }

    #[test]
    fn shuffled_choices_keep_letter_description_pairs() {
        let inst = NluInstance {
            premise: Some("p".into()),
            hypothesis: Some("h".into()),
            label_set: LabelSet::Choices(
                ChoiceSet::from_labels(["neutral", "entailment", "contradiction"], false).unwrap(),
            ),
            gold: Gold::Letters(vec!['B']),
            ..blank(TaskKind::Nli)
        };
        for seed in 0..20 {
            let opts = RenderOptions { shuffle_labels: true, seed, ..Default::default() };
            let r = render(&inst, &opts).unwrap();
            let Layout::Choices { choices } = &r.layout else { panic!() };
            let letter = choices.letter_of(&Canonical::Label("entailment".into())).unwrap();
            assert_eq!(r.pair.output, format!("({letter}) entailment"));
            assert!(r.pair.input.contains(&format!("({letter}) entailment")));
        }
    }

    #[test]
    fn sts_default_scale_extremes() {
        let mut inst = NluInstance {
            premise: Some("a".into()),
            hypothesis: Some("b".into()),
            gold: Gold::Score(5),
            ..blank(TaskKind::Sts)
        };
        let r = render(&inst, &RenderOptions::default()).unwrap();
        assert_eq!(
            r.pair.output,
            "(F) The two sentences are completely or mostly equivalent, as they mean the same thing."
        );
        inst.gold = Gold::Score(0);
        let r = render(&inst, &RenderOptions::default()).unwrap();
        assert_eq!(r.pair.output, "(A) The two sentences are completely dissimilar.");
        inst.gold = Gold::Score(6);
        assert_eq!(
            render(&inst, &RenderOptions::default()).unwrap_err(),
            PromptError::ScoreOutOfScale(6)
        );
    }

    #[test]
    fn sts_shuffled_letter_matches_permutation() {
        let inst = NluInstance {
            premise: Some("a".into()),
            hypothesis: Some("b".into()),
            gold: Gold::Score(3),
            ..blank(TaskKind::Sts)
        };
        let opts = RenderOptions { shuffle_labels: true, seed: 42, ..Default::default() };
        // Independent route: apply the documented permutation to the scale ourselves.
        let scale = StsScale::default();
        let seed = derive_seed(instance_seed(42, "ds", "i1"), &[b"choices"]);
        let perm = shuffle_choice_order(&scale.entries, seed);
        let pos = perm.iter().position(|(s, _)| *s == 3).unwrap();
        let expected = format!("({}) {}", (b'A' + pos as u8) as char, scale.entries[3].1);
        assert_eq!(render(&inst, &opts).unwrap().pair.output, expected);
    }

    #[test]
    fn shuffle_is_deterministic_permutation() {
        assert_eq!(shuffle_choice_order(&["a"], 77), vec!["a"]);
        let l: Vec<u32> = (0..10).collect();
        let a = shuffle_choice_order(&l, 5);
        assert_eq!(a, shuffle_choice_order(&l, 5));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, l);
    }

    #[test]
    fn negative_sampling() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(
            sample_negative_categories(&s(&["x"]), &s(&["x", "y"]), 1, 3).unwrap(),
            s(&["x", "y"])
        );
        let pool: Vec<String> = (0..48).map(|i| format!("specialty{i}")).collect();
        let gold = vec!["specialty17".to_string()];
        let a = sample_negative_categories(&gold, &pool, 12, 8).unwrap();
        assert_eq!(a.len(), 13);
        assert!(a.contains(&gold[0]));
        assert_eq!(a, sample_negative_categories(&gold, &pool, 12, 8).unwrap());
        assert!(matches!(
            sample_negative_categories(&s(&["x"]), &s(&["x", "y"]), 2, 3),
            Err(PromptError::PoolTooSmall { wanted: 2, available: 1 })
        ));
    }

    #[test]
    fn large_single_label_dc_is_subsampled() {
        let pool: Vec<String> = (0..48).map(|i| format!("Specialty {i}")).collect();
        let inst = NluInstance {
            source_text: "report".into(),
            label_set: LabelSet::Labels(pool),
            gold: Gold::Labels(vec!["Specialty 30".into()]),
            ..blank(TaskKind::DocumentClassification)
        };
        let r = render(&inst, &RenderOptions::default()).unwrap();
        let Layout::Choices { choices } = &r.layout else { panic!() };
        assert_eq!(choices.len(), 13);
        assert!(r.pair.output.ends_with("Specialty 30"));
        assert!(r.pair.input.contains("Only one option can be true."));
    }

    #[test]
    fn label_alias_expansion() {
        let aliases = default_label_aliases();
        assert_eq!(
            expand_label_name("GENERIF", &aliases),
            "Gene reference into a function (function of a gene)"
        );
        assert_eq!(expand_label_name("Drug", &aliases), "Drug");
        assert_eq!(expand_label_name("", &BTreeMap::new()), "");
    }

    #[test]
    fn preamble_is_constant() {
        let p = ner_fewshot_preamble();
        assert!(p.contains("Output None if there is no such span"));
        assert!(p.contains("one entity type per line"));
        assert_eq!(p, ner_fewshot_preamble());
    }

    #[test]
    fn window_marks_elided_edges() {
        let before: Vec<String> = vec!["s0".into(), "s1".into(), "s2".into()];
        let after: Vec<String> = vec!["s4".into()];
        assert_eq!(window_text(Some(&before), "T", Some(&after), 2), "... s1 s2 T s4");
        assert_eq!(window_text(Some(&before), "T", Some(&after), 0), "... T ...");
        let marked: Vec<String> = vec![ELLIPSIS.into(), "s2".into()];
        assert_eq!(window_text(Some(&marked), "T", None, 2), "... s2 T");
    }

    #[test]
    fn template_placeholders() {
        let vars: Vars = vec![("a", Some("1".into())), ("b", None)];
        assert_eq!(fill_template("x{a}y{{z}}", &vars).unwrap(), "x1y{z}");
        assert_eq!(
            fill_template("{b}", &vars).unwrap_err(),
            PromptError::MissingField("b".into())
        );
        assert_eq!(
            fill_template("{c}", &vars).unwrap_err(),
            PromptError::UnknownPlaceholder("c".into())
        );
        // Substituted values are not rescanned.
        let v: Vars = vec![("a", Some("{a}".into()))];
        assert_eq!(fill_template("{a}", &v).unwrap(), "{a}");
    }

    #[test]
    fn choice_option_struct_is_plain_data() {
        let o = ChoiceOption { letter: 'A', description: "d".into(), canonical: Canonical::Score(1) };
        assert_eq!(serde_json::to_string(&o).unwrap(), r#"{"letter":"A","description":"d","canonical":1}"#);
    }
}
