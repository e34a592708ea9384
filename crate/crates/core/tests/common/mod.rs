//! Seeded generators of valid instances for every task kind, and
//! reference implementations used as test oracles.

#![allow(dead_code)]

use std::collections::BTreeSet;

use nluprompt::prompt::{Layout, RenderedPrompt, StsScale};
use nluprompt::rng::SplitMix64;
use nluprompt::types::{
    Canonical, ChoiceSet, EntityMention, Gold, LabelSet, NluInstance, TaskKind,
};
use nluprompt::PredictionRecord;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tor", "vi", "sa", "du", "pel", "xo", "ni", "ber", "qua", "zen",
    "fi", "gro", "ha", "jul", "we", "yo", "ne", "no",
];

const TOKEN_LABELS: &[&str] = &[
    "Drug", "Alcohol", "Tobacco", "Living status", "Employment", "Gene or protein", "Disease",
    "Chemical", "Problem", "Test", "Treatment", "Species", "Cell line",
];

const EVENTS: &[&str] = &["Drug", "Alcohol", "Tobacco", "Employment", "LivingStatus"];

const ARGUMENTS: &[&str] =
    &["Method", "Status", "Status time", "Amount", "Frequency", "Type", "Duration", "History"];

pub struct Gen {
    pub rng: SplitMix64,
}

impl Gen {
    pub fn new(seed: u64) -> Self {
        Self { rng: SplitMix64::new(seed) }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.below(n as u64) as usize
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.rng.next_f64() < p
    }

    pub fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len())]
    }

    pub fn word(&mut self) -> String {
        loop {
            let n = self.range(1, 3);
            let mut w: String = (0..n).map(|_| *self.pick(SYLLABLES)).collect();
            if self.chance(0.15) {
                let mut c = w.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                w = std::iter::once(first).chain(c).collect();
            }
            if self.chance(0.08) {
                w.push_str(&self.below(100).to_string());
            }
            if self.chance(0.05) {
                w.push('é');
            }
            if !w.eq_ignore_ascii_case("none") {
                return w;
            }
        }
    }

    pub fn phrase(&mut self, lo: usize, hi: usize) -> String {
        let n = self.range(lo, hi);
        (0..n).map(|_| self.word()).collect::<Vec<_>>().join(" ")
    }

    pub fn sentence(&mut self, lo: usize, hi: usize) -> Vec<String> {
        let n = self.range(lo, hi);
        (0..n).map(|_| self.word()).collect()
    }

    /// Distinct picks from `pool`, in random order.
    pub fn subset(&mut self, pool: &[&str], lo: usize, hi: usize) -> Vec<String> {
        let k = self.range(lo, hi.min(pool.len()));
        self.rng
            .sample_indices(pool.len(), k)
            .into_iter()
            .map(|i| pool[i].to_string())
            .collect()
    }

    /// Disjoint word-aligned mentions over `words` with labels from `labels`.
    pub fn mentions(&mut self, words: &[String], labels: &[String], max: usize) -> Vec<EntityMention> {
        let mut starts = Vec::with_capacity(words.len());
        let mut pos = 0;
        for w in words {
            starts.push(pos);
            pos += w.chars().count() + 1;
        }
        let text = words.join(" ");
        let mut taken = vec![false; words.len()];
        let mut out = Vec::new();
        for _ in 0..self.range(0, max) {
            let len = self.range(1, 3).min(words.len());
            let first = self.below(words.len() - len + 1);
            if taken[first..first + len].iter().any(|t| *t) {
                continue;
            }
            taken[first..first + len].iter_mut().for_each(|t| *t = true);
            let s = starts[first];
            let e = starts[first + len - 1] + words[first + len - 1].chars().count();
            let span: String = text.chars().skip(s).take(e - s).collect();
            out.push(EntityMention::new(self.pick(labels).clone(), span).with_offsets(s, e));
        }
        out
    }

    pub fn descriptions(&mut self, n: usize) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let d = match self.below(10) {
                0 => format!("`{}' refers to `{}'", self.word(), self.word()),
                1 => "None of the above.".to_string(),
                2 => format!("{} ({}) {}", self.word(), (b'A' + self.below(n) as u8) as char, self.word()),
                3 => format!("{} ({}).", self.phrase(2, 6), self.word()),
                _ => self.phrase(1, 4),
            };
            if d.eq_ignore_ascii_case("none") || !seen.insert(d.to_lowercase()) {
                continue;
            }
            out.push(d);
        }
        out
    }

    fn choice_set(&mut self, n: usize, multi: bool) -> ChoiceSet {
        let descs = self.descriptions(n);
        let entries = descs.into_iter().enumerate().map(|(i, d)| {
            let canon = if i % 2 == 0 { d.clone() } else { format!("label_{i}") };
            (d, Canonical::Label(canon))
        });
        ChoiceSet::new(entries, multi).expect("generated choices are valid")
    }

    fn letters(&mut self, set: &ChoiceSet) -> Vec<char> {
        let n = set.len();
        if set.multi_select {
            let k = self.range(0, n.min(4));
            self.rng.sample_indices(n, k).into_iter().map(|i| set.options[i].letter).collect()
        } else {
            vec![set.options[self.below(n)].letter]
        }
    }

    fn context(&mut self) -> (Option<Vec<String>>, Option<Vec<String>>) {
        let side = |g: &mut Gen, ellipsis_first: bool| -> Option<Vec<String>> {
            if g.chance(0.3) {
                return None;
            }
            let mut v: Vec<String> = (0..g.range(0, 4)).map(|_| format!("{}.", g.phrase(2, 6))).collect();
            if g.chance(0.4) {
                if ellipsis_first {
                    v.insert(0, "...".into());
                } else {
                    v.push("...".into());
                }
            }
            Some(v)
        };
        (side(self, true), side(self, false))
    }

    pub fn instance(&mut self, task: TaskKind, id: usize) -> NluInstance {
        let words = self.sentence(3, 20);
        let source_text = words.join(" ");
        let mut inst =
            NluInstance::new(format!("g{id}"), format!("synthetic_{}", task.short_name().to_lowercase()), task);
        inst.source_text = source_text;
        match task {
            TaskKind::Ner | TaskKind::EventTriggerExtraction => {
                let labels = self.subset(TOKEN_LABELS, 1, 5);
                inst.gold = Gold::Mentions(self.mentions(&words, &labels, 6));
                inst.label_set = LabelSet::Labels(labels);
            }
            TaskKind::EventArgumentExtraction => {
                let labels = self.subset(ARGUMENTS, 1, 3);
                let event = self.pick(EVENTS).to_string();
                let trig = self.mentions(&words, std::slice::from_ref(&event), 1).pop();
                inst.trigger = Some(trig.unwrap_or_else(|| EntityMention::new(event, words[0].clone())));
                inst.gold = Gold::Mentions(self.mentions(&words, &labels, 3));
                inst.label_set = LabelSet::Labels(labels);
                (inst.context_before, inst.context_after) = self.context();
            }
            TaskKind::EventArgumentClassification => {
                let n = self.range(2, 6);
                let set = self.choice_set(n, false);
                inst.gold = Gold::Letters(self.letters(&set));
                inst.label_set = LabelSet::Choices(set);
                inst.trigger = Some(EntityMention::new(self.pick(EVENTS).to_string(), words[0].clone()));
                inst.target = Some(self.pick(ARGUMENTS).to_string());
                (inst.context_before, inst.context_after) = self.context();
            }
            TaskKind::DocumentClassification => {
                if self.chance(0.25) {
                    // A long single-label list, beyond what letters can cover.
                    let n = self.range(14, 48);
                    let labels = self.descriptions(n);
                    inst.gold = Gold::Labels(vec![self.pick(&labels).clone()]);
                    inst.label_set = LabelSet::Labels(labels);
                } else {
                    let n = self.range(2, 15);
                    let multi = self.chance(0.5);
                    let set = self.choice_set(n, multi);
                    inst.gold = Gold::Letters(self.letters(&set));
                    inst.label_set = LabelSet::Choices(set);
                }
                if self.chance(0.5) {
                    inst.target = Some(self.phrase(1, 4));
                }
            }
            TaskKind::RelationExtraction => {
                let n = self.range(2, 6);
                let set = self.choice_set(n, false);
                inst.gold = Gold::Letters(self.letters(&set));
                inst.label_set = LabelSet::Choices(set);
                let labels = vec!["Person".to_string(), "Problem".to_string()];
                let mut pair = self.mentions(&words, &labels, 6);
                while pair.len() < 2 {
                    pair.push(EntityMention::new("Problem", words[0].clone()).with_offsets(0, words[0].chars().count()));
                }
                inst.entity_pair = Some((pair[0].clone(), pair[1].clone()));
                if self.chance(0.7) {
                    inst.target = Some(self.phrase(1, 2));
                }
                (inst.context_before, inst.context_after) = self.context();
            }
            TaskKind::Nli => {
                let set = ChoiceSet::from_labels(["neutral", "entailment", "contradiction"], false).unwrap();
                inst.gold = Gold::Letters(self.letters(&set));
                inst.label_set = LabelSet::Choices(set);
                inst.premise = Some(format!("{}.", self.phrase(3, 15)));
                inst.hypothesis = Some(format!("{}.", self.phrase(3, 10)));
            }
            TaskKind::Qa => {
                let n = self.range(2, 4);
                let set = self.choice_set(n, false);
                inst.gold = Gold::Letters(self.letters(&set));
                inst.label_set = LabelSet::Choices(set);
                inst.question = Some(format!("{}?", self.phrase(3, 8)));
            }
            TaskKind::Sts => {
                inst.premise = Some(format!("{}.", self.phrase(3, 10)));
                inst.hypothesis = Some(format!("{}.", self.phrase(3, 10)));
                if self.chance(0.3) {
                    let lo = self.range(0, 3) as i64;
                    let n = self.range(2, 6);
                    let descs = self.descriptions(n);
                    let entries: Vec<(i64, String)> =
                        descs.into_iter().enumerate().map(|(i, d)| (lo + i as i64, d)).collect();
                    let scale = StsScale::new(entries).expect("generated scale is valid");
                    inst.gold = Gold::Score(lo + self.below(n) as i64);
                    inst.label_set = LabelSet::Choices(scale.to_choices().unwrap());
                } else {
                    inst.gold = Gold::Score(self.range(0, 5) as i64);
                }
            }
            TaskKind::Summarization => {
                inst.gold = Gold::Text(self.phrase(1, 12));
            }
        }
        inst.validate().expect("generated instance is valid");
        inst
    }

    /// Round-robin over every task kind.
    pub fn instances(&mut self, n: usize) -> Vec<NluInstance> {
        (0..n).map(|i| self.instance(TaskKind::ALL[i % TaskKind::ALL.len()], i)).collect()
    }
}

fn label_text_multiset(ms: &[EntityMention]) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = ms.iter().map(|m| (m.label.clone(), m.text.clone())).collect();
    v.sort();
    v
}

fn canon_set(v: &[Canonical]) -> BTreeSet<String> {
    v.iter().map(|c| c.to_string()).collect()
}

/// Whether `record` carries exactly the instance's gold annotation.
pub fn recovers_gold(inst: &NluInstance, rendered: &RenderedPrompt, record: &PredictionRecord) -> bool {
    if record.error.is_some() {
        return false;
    }
    match (&inst.gold, &rendered.layout) {
        (Gold::Mentions(gold), Layout::Tokens { .. }) => record
            .mentions
            .as_deref()
            .is_some_and(|m| label_text_multiset(m) == label_text_multiset(gold)),
        (Gold::Score(s), Layout::Choices { .. }) => record.score == Some(*s),
        (_, Layout::Choices { .. }) => {
            let (Some(pred), Some(gold)) = (record.canonicals(&rendered.layout), inst.gold_canonicals()) else {
                return false;
            };
            canon_set(&pred) == canon_set(&gold)
        }
        (Gold::Text(t), Layout::Text) => record.text.as_deref() == Some(t.trim()),
        _ => false,
    }
}

/// Maximum one-to-one matching between two span lists by exhaustive search.
pub fn brute_force_matching(
    pred: &[(usize, usize)],
    gold: &[(usize, usize)],
    compatible: &dyn Fn((usize, usize), (usize, usize)) -> bool,
) -> usize {
    fn go(
        i: usize,
        pred: &[(usize, usize)],
        gold: &[(usize, usize)],
        used: &mut Vec<bool>,
        compatible: &dyn Fn((usize, usize), (usize, usize)) -> bool,
    ) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gold, used, compatible);
        for g in 0..gold.len() {
            if !used[g] && compatible(pred[i], gold[g]) {
                used[g] = true;
                best = best.max(1 + go(i + 1, pred, gold, used, compatible));
                used[g] = false;
            }
        }
        best
    }
    go(0, pred, gold, &mut vec![false; gold.len()], compatible)
}

/// Pearson's r for integer-valued samples. Sums are exact in i128, so the
/// only rounding happens in the final division and square root.
pub fn pearson_direct(x: &[i64], y: &[i64]) -> f64 {
    let n = x.len() as i128;
    let sx: i128 = x.iter().map(|&a| a as i128).sum();
    let sy: i128 = y.iter().map(|&b| b as i128).sum();
    let sxy: i128 = x.iter().zip(y).map(|(&a, &b)| a as i128 * b as i128).sum();
    let sxx: i128 = x.iter().map(|&a| a as i128 * a as i128).sum();
    let syy: i128 = y.iter().map(|&b| b as i128 * b as i128).sum();
    let num = (n * sxy - sx * sy) as f64;
    let vx = (n * sxx - sx * sx) as f64;
    let vy = (n * syy - sy * sy) as f64;
    num / (vx * vy).sqrt()
}
