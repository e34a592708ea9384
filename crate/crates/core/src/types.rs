//! Domain types shared by every stage: the task taxonomy, annotations,
//! choice sets, instances and rendered prompt pairs.
//!
//! The JSON shape of [`NluInstance`] is the interchange format between
//! stages (one object per line, snake_case field names).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "NER")]
    Ner,
    #[serde(alias = "ETE")]
    EventTriggerExtraction,
    #[serde(alias = "EAE")]
    EventArgumentExtraction,
    #[serde(alias = "EAC")]
    EventArgumentClassification,
    #[serde(alias = "DC")]
    DocumentClassification,
    #[serde(alias = "RE")]
    RelationExtraction,
    #[serde(rename = "NLI")]
    Nli,
    #[serde(rename = "QA")]
    Qa,
    #[serde(rename = "STS")]
    Sts,
    #[serde(alias = "SUM")]
    Summarization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputCategory {
    TokenClassification,
    SequenceClassification,
    SequenceRegression,
    Generation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::Ner,
        TaskKind::EventTriggerExtraction,
        TaskKind::EventArgumentExtraction,
        TaskKind::EventArgumentClassification,
        TaskKind::DocumentClassification,
        TaskKind::RelationExtraction,
        TaskKind::Nli,
        TaskKind::Qa,
        TaskKind::Sts,
        TaskKind::Summarization,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::Ner => "NER",
            TaskKind::EventTriggerExtraction => "ETE",
            TaskKind::EventArgumentExtraction => "EAE",
            TaskKind::EventArgumentClassification => "EAC",
            TaskKind::DocumentClassification => "DC",
            TaskKind::RelationExtraction => "RE",
            TaskKind::Nli => "NLI",
            TaskKind::Qa => "QA",
            TaskKind::Sts => "STS",
            TaskKind::Summarization => "SUM",
        }
    }

    pub fn output_category(self) -> OutputCategory {
        output_category(self)
    }
}

/// Maps a task onto the shape of its expected output.
pub fn output_category(task: TaskKind) -> OutputCategory {
    use TaskKind::*;
    match task {
        Ner | EventTriggerExtraction | EventArgumentExtraction => {
            OutputCategory::TokenClassification
        }
        EventArgumentClassification | DocumentClassification | RelationExtraction | Nli | Qa => {
            OutputCategory::SequenceClassification
        }
        Sts => OutputCategory::SequenceRegression,
        Summarization => OutputCategory::Generation,
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Error)]
#[error("unknown task kind `{0}`")]
pub struct UnknownTask(pub String);

impl FromStr for TaskKind {
    type Err = UnknownTask;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        TaskKind::ALL
            .into_iter()
            .find(|k| {
                k.short_name().eq_ignore_ascii_case(t)
                    || format!("{k:?}").eq_ignore_ascii_case(t)
            })
            .ok_or_else(|| UnknownTask(s.to_string()))
    }
}

/// Counts Unicode scalar values.
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Slices `s` by character offsets, `None` when out of range.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = s.char_indices().map(|(b, _)| b).chain(std::iter::once(s.len()));
    let b_start = indices.nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&s[b_start..b_end])
}

/// A labeled span of source text. Offsets count characters, `char_end` is
/// exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityMention {
    pub label: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_end: Option<usize>,
    /// Zero-based ordinal of `text` among its occurrences in the source,
    /// used to place mentions that arrive without offsets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occurrence_hint: Option<usize>,
}

impl EntityMention {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            text: text.into(),
            char_start: None,
            char_end: None,
            occurrence_hint: None,
        }
    }

    pub fn with_offsets(mut self, start: usize, end: usize) -> Self {
        self.char_start = Some(start);
        self.char_end = Some(end);
        self
    }

    pub fn span(&self) -> Option<(usize, usize)> {
        self.char_start.zip(self.char_end)
    }

    pub fn is_aligned(&self) -> bool {
        self.span().is_some()
    }

    /// Checks the offset invariants against `source` when offsets are present.
    pub fn check_offsets(&self, source: &str) -> Result<(), ValidationError> {
        match (self.char_start, self.char_end) {
            (None, None) => Ok(()),
            (Some(s), Some(e)) => {
                if s >= e {
                    return Err(ValidationError::BadOffsets(format!(
                        "mention `{}` has start {s} >= end {e}",
                        self.text
                    )));
                }
                match char_slice(source, s, e) {
                    Some(slice) if slice == self.text => Ok(()),
                    Some(slice) => Err(ValidationError::BadOffsets(format!(
                        "mention `{}` at {s}..{e} covers `{slice}`",
                        self.text
                    ))),
                    None => Err(ValidationError::BadOffsets(format!(
                        "mention `{}` at {s}..{e} is outside the source",
                        self.text
                    ))),
                }
            }
            _ => Err(ValidationError::BadOffsets(format!(
                "mention `{}` has only one offset",
                self.text
            ))),
        }
    }

    /// Fills missing offsets from `occurrence_hint` (default: first occurrence).
    /// Returns false when the text does not occur often enough.
    pub fn resolve_offsets(&mut self, source: &str) -> bool {
        if self.is_aligned() {
            return true;
        }
        if self.text.is_empty() {
            return false;
        }
        let nth = self.occurrence_hint.unwrap_or(0);
        let mut from = 0;
        let mut found = None;
        for _ in 0..=nth {
            match source[from..].find(&self.text) {
                Some(pos) => {
                    found = Some(from + pos);
                    // Step by one char so overlapping occurrences are counted.
                    let step = source[from + pos..].chars().next().map_or(1, char::len_utf8);
                    from += pos + step;
                }
                None => return false,
            }
        }
        let byte_start = found.expect("loop ran at least once");
        let start = source[..byte_start].chars().count();
        let end = start + char_len(&self.text);
        self.char_start = Some(start);
        self.char_end = Some(end);
        true
    }
}

/// What a choice option stands for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Canonical {
    Score(i64),
    Label(String),
}

impl fmt::Display for Canonical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Canonical::Score(s) => write!(f, "{s}"),
            Canonical::Label(l) => f.write_str(l),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub letter: char,
    pub description: String,
    pub canonical: Canonical,
}

/// Ordered, lettered options. Letters run `A, B, C, ...` in list order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub options: Vec<ChoiceOption>,
    #[serde(default)]
    pub multi_select: bool,
}

pub const MAX_CHOICES: usize = 26;

pub fn letter_at(index: usize) -> Option<char> {
    (index < MAX_CHOICES).then(|| (b'A' + index as u8) as char)
}

pub fn letter_index(letter: char) -> Option<usize> {
    letter.is_ascii_uppercase().then(|| (letter as u8 - b'A') as usize)
}

impl ChoiceSet {
    /// Builds a set from `(description, canonical)` pairs, assigning letters.
    pub fn new(
        entries: impl IntoIterator<Item = (String, Canonical)>,
        multi_select: bool,
    ) -> Result<Self, ValidationError> {
        let options = entries
            .into_iter()
            .enumerate()
            .map(|(i, (description, canonical))| {
                letter_at(i)
                    .map(|letter| ChoiceOption { letter, description, canonical })
                    .ok_or(ValidationError::TooManyChoices)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let set = ChoiceSet { options, multi_select };
        set.validate()?;
        Ok(set)
    }

    /// Options whose description doubles as the canonical label.
    pub fn from_labels<S: Into<String>>(
        labels: impl IntoIterator<Item = S>,
        multi_select: bool,
    ) -> Result<Self, ValidationError> {
        Self::new(
            labels.into_iter().map(|l| {
                let l = l.into();
                (l.clone(), Canonical::Label(l))
            }),
            multi_select,
        )
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }

    pub fn get(&self, letter: char) -> Option<&ChoiceOption> {
        letter_index(letter).and_then(|i| self.options.get(i))
    }

    pub fn letter_of(&self, canonical: &Canonical) -> Option<char> {
        self.options
            .iter()
            .find(|o| &o.canonical == canonical)
            .map(|o| o.letter)
    }

    pub fn is_regression(&self) -> bool {
        !self.options.is_empty()
            && self.options.iter().all(|o| matches!(o.canonical, Canonical::Score(_)))
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.options.len() > MAX_CHOICES {
            return Err(ValidationError::TooManyChoices);
        }
        let mut seen = BTreeSet::new();
        let mut canon = BTreeSet::new();
        for (i, o) in self.options.iter().enumerate() {
            if Some(o.letter) != letter_at(i) {
                return Err(ValidationError::BadChoiceSet(format!(
                    "option {i} carries letter {} instead of {}",
                    o.letter,
                    letter_at(i).unwrap_or('?')
                )));
            }
            if o.description.trim().is_empty() {
                return Err(ValidationError::BadChoiceSet(format!(
                    "option {} has an empty description",
                    o.letter
                )));
            }
            if !seen.insert(o.description.as_str()) {
                return Err(ValidationError::BadChoiceSet(format!(
                    "duplicate description `{}`",
                    o.description
                )));
            }
            if !canon.insert(&o.canonical) {
                return Err(ValidationError::BadChoiceSet(format!(
                    "duplicate canonical `{}`",
                    o.canonical
                )));
            }
        }
        let scores: Vec<i64> = self
            .options
            .iter()
            .filter_map(|o| match o.canonical {
                Canonical::Score(s) => Some(s),
                Canonical::Label(_) => None,
            })
            .collect();
        if !scores.is_empty() {
            if scores.len() != self.options.len() {
                return Err(ValidationError::BadChoiceSet(
                    "mixes score and label canonicals".into(),
                ));
            }
            let min = *scores.iter().min().expect("non-empty");
            let max = *scores.iter().max().expect("non-empty");
            if (max - min) as usize + 1 != scores.len() {
                return Err(ValidationError::BadChoiceSet(
                    "scores do not form a contiguous integer range".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Labels the model may use: a plain ordered label list (token tasks, or a
/// large single-label pool to be sub-sampled) or a lettered [`ChoiceSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSet {
    Labels(Vec<String>),
    Choices(ChoiceSet),
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet::Labels(Vec::new())
    }
}

impl LabelSet {
    pub fn labels(&self) -> Option<&[String]> {
        match self {
            LabelSet::Labels(l) => Some(l),
            LabelSet::Choices(_) => None,
        }
    }

    pub fn choices(&self) -> Option<&ChoiceSet> {
        match self {
            LabelSet::Choices(c) => Some(c),
            LabelSet::Labels(_) => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            LabelSet::Labels(l) => l.is_empty(),
            LabelSet::Choices(c) => c.is_empty(),
        }
    }
}

/// Gold annotation. Choice tasks carry letters into the instance's
/// [`ChoiceSet`], or canonical label names when the label set is a plain list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Mentions(Vec<EntityMention>),
    Letters(Vec<char>),
    Labels(Vec<String>),
    Score(i64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NluInstance {
    pub id: String,
    #[serde(default)]
    pub dataset: String,
    pub task: TaskKind,
    #[serde(default)]
    pub source_text: String,
    /// Sentences preceding `source_text`. An entry equal to `...` marks
    /// text elided at that edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_before: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_after: Option<Vec<String>>,
    #[serde(default)]
    pub label_set: LabelSet,
    pub gold: Gold,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// NLI premise, or the first sentence of an STS pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    /// NLI hypothesis, or the second sentence of an STS pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<EntityMention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_pair: Option<(EntityMention, EntityMention)>,
    /// The queried attribute: argument role (EAC), relation type (RE) or
    /// classification target (DC).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Replaces the task's default prompt template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("gold annotation does not match the task's output category: {0}")]
    GoldMismatch(String),
    #[error("bad offsets: {0}")]
    BadOffsets(String),
    #[error("bad choice set: {0}")]
    BadChoiceSet(String),
    #[error("more than {MAX_CHOICES} choices cannot be lettered")]
    TooManyChoices,
    #[error("bad label set: {0}")]
    BadLabelSet(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
}

impl NluInstance {
    /// Empty instance with no gold mentions; fill in the task fields after.
    pub fn new(id: impl Into<String>, dataset: impl Into<String>, task: TaskKind) -> Self {
        Self {
            id: id.into(),
            dataset: dataset.into(),
            task,
            source_text: String::new(),
            context_before: None,
            context_after: None,
            label_set: LabelSet::default(),
            gold: Gold::Mentions(Vec::new()),
            question: None,
            premise: None,
            hypothesis: None,
            trigger: None,
            entity_pair: None,
            target: None,
            template: None,
        }
    }

    pub fn category(&self) -> OutputCategory {
        output_category(self.task)
    }

    /// Checks every structural invariant. Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, ValidationError> {
        let mut warnings = Vec::new();
        if self.id.is_empty() {
            return Err(ValidationError::MissingField("id"));
        }
        match (self.category(), &self.gold) {
            (OutputCategory::TokenClassification, Gold::Mentions(ms)) => {
                let labels = self.label_set.labels().ok_or_else(|| {
                    ValidationError::BadLabelSet("token tasks take a plain label list".into())
                })?;
                check_label_list(labels)?;
                for m in ms {
                    if !labels.contains(&m.label) {
                        return Err(ValidationError::GoldMismatch(format!(
                            "mention label `{}` is not in the label set",
                            m.label
                        )));
                    }
                    m.check_offsets(&self.source_text)?;
                }
                if matches!(self.task, TaskKind::EventArgumentExtraction) && self.trigger.is_none() {
                    return Err(ValidationError::MissingField("trigger"));
                }
            }
            (OutputCategory::SequenceClassification, Gold::Letters(letters)) => {
                let choices = self.label_set.choices().ok_or_else(|| {
                    ValidationError::BadLabelSet("letter gold needs a choice set".into())
                })?;
                choices.validate()?;
                if choices.is_empty() {
                    return Err(ValidationError::BadLabelSet("empty choice set".into()));
                }
                for l in letters {
                    if choices.get(*l).is_none() {
                        return Err(ValidationError::GoldMismatch(format!(
                            "gold letter {l} is not among the choices"
                        )));
                    }
                }
                let distinct: BTreeSet<_> = letters.iter().collect();
                if distinct.len() != letters.len() {
                    return Err(ValidationError::GoldMismatch("repeated gold letter".into()));
                }
                if !choices.multi_select && letters.len() != 1 {
                    return Err(ValidationError::GoldMismatch(format!(
                        "single-select gold holds {} letters",
                        letters.len()
                    )));
                }
                if letters.is_empty() {
                    warnings.push(format!("{}: empty multi-label gold", self.id));
                }
            }
            (OutputCategory::SequenceClassification, Gold::Labels(names)) => {
                let labels = self.label_set.labels().ok_or_else(|| {
                    ValidationError::BadLabelSet("label gold needs a plain label list".into())
                })?;
                check_label_list(labels)?;
                if names.len() != 1 {
                    return Err(ValidationError::GoldMismatch(
                        "label-list gold must name exactly one label".into(),
                    ));
                }
                if !labels.contains(&names[0]) {
                    return Err(ValidationError::GoldMismatch(format!(
                        "gold label `{}` is not in the label set",
                        names[0]
                    )));
                }
            }
            (OutputCategory::SequenceRegression, Gold::Score(_)) => {
                if let Some(c) = self.label_set.choices() {
                    c.validate()?;
                    if !c.is_regression() {
                        return Err(ValidationError::BadChoiceSet(
                            "regression choices need score canonicals".into(),
                        ));
                    }
                }
            }
            (OutputCategory::Generation, Gold::Text(_)) => {}
            (cat, _) => {
                return Err(ValidationError::GoldMismatch(format!(
                    "{:?} task carries incompatible gold",
                    cat
                )))
            }
        }
        match self.task {
            TaskKind::EventArgumentClassification if self.trigger.is_none() => {
                return Err(ValidationError::MissingField("trigger"))
            }
            TaskKind::RelationExtraction if self.entity_pair.is_none() => {
                return Err(ValidationError::MissingField("entity_pair"))
            }
            TaskKind::Nli | TaskKind::Sts
                if self.premise.is_none() || self.hypothesis.is_none() =>
            {
                return Err(ValidationError::MissingField("premise/hypothesis"))
            }
            TaskKind::Qa if self.question.is_none() => {
                return Err(ValidationError::MissingField("question"))
            }
            _ => {}
        }
        Ok(warnings)
    }

    /// The gold answer as canonical values, for choice and regression tasks.
    pub fn gold_canonicals(&self) -> Option<Vec<Canonical>> {
        match &self.gold {
            Gold::Letters(letters) => {
                let choices = self.label_set.choices()?;
                letters
                    .iter()
                    .map(|l| choices.get(*l).map(|o| o.canonical.clone()))
                    .collect()
            }
            Gold::Labels(names) => Some(names.iter().cloned().map(Canonical::Label).collect()),
            Gold::Score(s) => Some(vec![Canonical::Score(*s)]),
            _ => None,
        }
    }
}

fn check_label_list(labels: &[String]) -> Result<(), ValidationError> {
    if labels.is_empty() {
        return Err(ValidationError::BadLabelSet("empty label list".into()));
    }
    let mut seen = BTreeSet::new();
    for l in labels {
        if l.trim().is_empty() || l.trim() != l || l.contains('\n') {
            return Err(ValidationError::BadLabelSet(format!("unusable label `{l}`")));
        }
        // Output lines are matched case-insensitively.
        if !seen.insert(l.to_lowercase()) {
            return Err(ValidationError::BadLabelSet(format!(
                "labels collide ignoring case: `{l}`"
            )));
        }
    }
    Ok(())
}

/// A rendered prompt with its gold completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub instance_id: String,
    pub input: String,
    pub output: String,
}
