//! Scoring: entity-level strict/relaxed P/R/F1, token-level F1, accuracy,
//! per-class classification scores, Pearson correlation, and macro
//! aggregation over benchmark rosters.
//!
//! Divisions by zero are defined as 0 so reports aggregate without NaNs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::PredictionRecord;
use crate::prompt::Layout;
use crate::types::{EntityMention, Gold, NluInstance, OutputCategory, TaskKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("gold mention `{0}` has no offsets")]
    MissingGoldOffsets(String),
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no items to score")]
    EmptyInput,
    #[error("label `{0}` is outside the label universe")]
    UnknownLabel(String),
    #[error("a series has zero variance")]
    ZeroVariance,
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("dataset `{0}` appears more than once")]
    DuplicateDataset(String),
    #[error("benchmark `{benchmark}` lists `{dataset}` but no report covers it")]
    MissingDataset { benchmark: String, dataset: String },
    #[error("dataset mixes instances from several tasks")]
    MixedTasks,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl PrfScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1, tp, fp, fn_ }
    }

    pub fn add(&self, other: &PrfScores) -> PrfScores {
        PrfScores::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Same label, identical character span.
    Strict,
    /// Same label, spans share at least one character.
    Relaxed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub overall: PrfScores,
    pub per_class: BTreeMap<String, PrfScores>,
}

impl EntityScores {
    pub fn merge(&mut self, other: &EntityScores) {
        self.overall = self.overall.add(&other.overall);
        for (label, s) in &other.per_class {
            let e = self.per_class.entry(label.clone()).or_default();
            *e = e.add(s);
        }
    }
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0.max(b.0) < a.1.min(b.1)
}

/// Matched pairs per label under `mode`, one-to-one, greedy over
/// predictions in source order. Relaxed mode first takes every exact match,
/// then matches leftover predictions to the earliest overlapping gold.
fn match_count(pred: &[(usize, usize)], gold: &[(usize, usize)], mode: MatchMode) -> usize {
    let mut gold_used = vec![false; gold.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut tp = 0;
    for (pi, p) in pred.iter().enumerate() {
        if let Some(gi) = (0..gold.len()).find(|&gi| !gold_used[gi] && gold[gi] == *p) {
            gold_used[gi] = true;
            pred_used[pi] = true;
            tp += 1;
        }
    }
    if mode == MatchMode::Relaxed {
        for (pi, p) in pred.iter().enumerate() {
            if pred_used[pi] {
                continue;
            }
            if let Some(gi) = (0..gold.len()).find(|&gi| !gold_used[gi] && overlaps(gold[gi], *p)) {
                gold_used[gi] = true;
                pred_used[pi] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// Entity-level scores. Predictions without offsets count as false positives.
pub fn entity_prf(
    pred: &[EntityMention],
    gold: &[EntityMention],
    mode: MatchMode,
) -> Result<EntityScores, MetricError> {
    // Per label: aligned prediction spans, unaligned predictions, gold spans.
    type Spans = Vec<(usize, usize)>;
    let mut by_label: BTreeMap<&str, (Spans, usize, Spans)> = BTreeMap::new();
    for g in gold {
        let span = g.span().ok_or_else(|| MetricError::MissingGoldOffsets(g.text.clone()))?;
        by_label.entry(g.label.as_str()).or_default().2.push(span);
    }
    for p in pred {
        let entry = by_label.entry(p.label.as_str()).or_default();
        match p.span() {
            Some(span) => entry.0.push(span),
            None => entry.1 += 1,
        }
    }
    let mut scores = EntityScores::default();
    for (label, (mut p, unaligned, mut g)) in by_label {
        p.sort_unstable();
        g.sort_unstable();
        let tp = match_count(&p, &g, mode);
        let s = PrfScores::from_counts(tp, p.len() + unaligned - tp, g.len() - tp);
        scores.overall = scores.overall.add(&s);
        scores.per_class.insert(label.to_string(), s);
    }
    Ok(scores)
}

/// Micro-averaged token-level scores over `positive_labels`.
pub fn token_prf<S: AsRef<str>>(
    pred_tags: &[S],
    gold_tags: &[S],
    positive_labels: &BTreeSet<String>,
) -> Result<PrfScores, MetricError> {
    if pred_tags.len() != gold_tags.len() {
        return Err(MetricError::LengthMismatch(pred_tags.len(), gold_tags.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred_tags.iter().zip(gold_tags) {
        let (p, g) = (p.as_ref(), g.as_ref());
        let p_pos = positive_labels.contains(p);
        let g_pos = positive_labels.contains(g);
        if p_pos && p == g {
            tp += 1;
        } else {
            if p_pos {
                fp += 1;
            }
            if g_pos {
                fn_ += 1;
            }
        }
    }
    Ok(PrfScores::from_counts(tp, fp, fn_))
}

/// Fraction of exact matches; `None` predictions (unscoreable) are misses.
pub fn accuracy<T: PartialEq>(preds: &[Option<T>], golds: &[T]) -> Result<f64, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch(preds.len(), golds.len()));
    }
    if golds.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == Some(*g))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub per_class: BTreeMap<String, PrfScores>,
    pub micro: PrfScores,
    /// Mean per-class F1 over labels with gold support.
    pub macro_f1: f64,
}

impl ClassificationScores {
    /// Micro scores pooled over every label except `excluded`.
    pub fn micro_excluding(&self, excluded: &BTreeSet<String>) -> PrfScores {
        self.per_class
            .iter()
            .filter(|(l, _)| !excluded.contains(*l))
            .fold(PrfScores::default(), |acc, (_, s)| acc.add(s))
    }
}

/// Per-class scores from label sets; multi-label instances contribute one
/// count per label. `None` predictions contribute only false negatives.
pub fn classification_prf(
    preds: &[Option<BTreeSet<String>>],
    golds: &[BTreeSet<String>],
    labels: &[String],
) -> Result<ClassificationScores, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch(preds.len(), golds.len()));
    }
    let mut counts: BTreeMap<&str, (usize, usize, usize)> =
        labels.iter().map(|l| (l.as_str(), (0, 0, 0))).collect();
    let empty = BTreeSet::new();
    for (p, g) in preds.iter().zip(golds) {
        let p = p.as_ref().unwrap_or(&empty);
        for l in p.union(g) {
            let c = counts
                .get_mut(l.as_str())
                .ok_or_else(|| MetricError::UnknownLabel(l.clone()))?;
            match (p.contains(l), g.contains(l)) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    let per_class: BTreeMap<String, PrfScores> = counts
        .into_iter()
        .map(|(l, (tp, fp, fn_))| (l.to_string(), PrfScores::from_counts(tp, fp, fn_)))
        .collect();
    let micro = per_class.values().fold(PrfScores::default(), |acc, s| acc.add(s));
    let supported: Vec<f64> = per_class
        .values()
        .filter(|s| s.tp + s.fn_ > 0)
        .map(|s| s.f1)
        .collect();
    let macro_f1 = if supported.is_empty() {
        0.0
    } else {
        supported.iter().sum::<f64>() / supported.len() as f64
    };
    Ok(ClassificationScores { per_class, micro, macro_f1 })
}

/// Pearson product-moment correlation, clamped to `[-1, 1]`.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(MetricError::TooFewPoints(n));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub task: TaskKind,
    pub metric_name: String,
    pub value: f64,
    #[serde(default)]
    pub per_class: BTreeMap<String, PrfScores>,
    pub n_instances: usize,
    pub n_unscoreable: usize,
    /// Entity F1 under the overlap criterion (token tasks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxed_f1: Option<f64>,
}

/// Canonical labels that mean "no relation" and are left out of RE micro-F1.
fn is_negative_relation(label: &str) -> bool {
    let l = label.trim().trim_end_matches('.').to_lowercase();
    matches!(l.as_str(), "none" | "none of the above" | "no relation" | "false")
}

/// Scores one dataset. `items` pairs each instance with the layout its
/// prompt used and the parsed prediction.
pub fn evaluate_dataset(
    items: &[(&NluInstance, &Layout, &PredictionRecord)],
) -> Result<EvalReport, MetricError> {
    let (first, _, _) = items.first().ok_or(MetricError::EmptyInput)?;
    let task = first.task;
    if items.iter().any(|(i, _, _)| i.task != task) {
        return Err(MetricError::MixedTasks);
    }
    let n_unscoreable = items.iter().filter(|(_, _, r)| r.error.is_some()).count();
    let mut report = EvalReport {
        dataset: first.dataset.clone(),
        task,
        metric_name: String::new(),
        value: 0.0,
        per_class: BTreeMap::new(),
        n_instances: items.len(),
        n_unscoreable,
        relaxed_f1: None,
    };
    match task.output_category() {
        OutputCategory::TokenClassification => {
            let mut strict = EntityScores::default();
            let mut relaxed = EntityScores::default();
            for (inst, _, rec) in items {
                let Gold::Mentions(gold) = &inst.gold else { continue };
                let mut gold = gold.clone();
                for g in gold.iter_mut() {
                    if !g.resolve_offsets(&inst.source_text) {
                        return Err(MetricError::MissingGoldOffsets(g.text.clone()));
                    }
                }
                let pred = rec.mentions.as_deref().unwrap_or(&[]);
                strict.merge(&entity_prf(pred, &gold, MatchMode::Strict)?);
                relaxed.merge(&entity_prf(pred, &gold, MatchMode::Relaxed)?);
            }
            report.metric_name = "entity_f1".into();
            report.value = strict.overall.f1;
            report.per_class = strict.per_class;
            report.relaxed_f1 = Some(relaxed.overall.f1);
        }
        OutputCategory::SequenceClassification => {
            let mut universe = BTreeSet::new();
            let mut preds = Vec::with_capacity(items.len());
            let mut golds = Vec::with_capacity(items.len());
            let mut multi = false;
            for (inst, layout, rec) in items {
                if let Layout::Choices { choices } = layout {
                    multi |= choices.multi_select;
                    universe.extend(choices.options.iter().map(|o| o.canonical.to_string()));
                }
                let gold: BTreeSet<String> = inst
                    .gold_canonicals()
                    .unwrap_or_default()
                    .iter()
                    .map(ToString::to_string)
                    .collect();
                universe.extend(gold.iter().cloned());
                let pred = if rec.error.is_some() {
                    None
                } else {
                    rec.canonicals(layout)
                        .map(|c| c.iter().map(ToString::to_string).collect::<BTreeSet<_>>())
                };
                preds.push(pred);
                golds.push(gold);
            }
            let labels: Vec<String> = universe.into_iter().collect();
            let cls = classification_prf(&preds, &golds, &labels)?;
            match task {
                TaskKind::RelationExtraction => {
                    let negatives: BTreeSet<String> =
                        labels.iter().filter(|l| is_negative_relation(l)).cloned().collect();
                    report.metric_name = "micro_f1".into();
                    report.value = cls.micro_excluding(&negatives).f1;
                }
                TaskKind::DocumentClassification if multi => {
                    report.metric_name = "micro_f1".into();
                    report.value = cls.micro.f1;
                }
                _ => {
                    report.metric_name = "accuracy".into();
                    report.value = accuracy(&preds, &golds)?;
                }
            }
            report.per_class = cls.per_class;
        }
        OutputCategory::SequenceRegression => {
            let (xs, ys): (Vec<f64>, Vec<f64>) = items
                .iter()
                .filter_map(|(inst, _, rec)| match (&inst.gold, rec.score) {
                    (Gold::Score(g), Some(p)) if rec.error.is_none() => Some((p as f64, *g as f64)),
                    _ => None,
                })
                .unzip();
            report.metric_name = "pearson".into();
            // Fewer than two scoreable points or a constant series score 0.
            report.value = pearson(&xs, &ys).unwrap_or(0.0);
        }
        OutputCategory::Generation => {
            let hits: Vec<Option<&str>> = items
                .iter()
                .map(|(_, _, rec)| rec.text.as_deref())
                .collect();
            let golds: Vec<&str> = items
                .iter()
                .map(|(inst, _, _)| match &inst.gold {
                    Gold::Text(t) => t.trim(),
                    _ => "",
                })
                .collect();
            report.metric_name = "exact_match".into();
            report.value = accuracy(&hits, &golds)?;
        }
    }
    Ok(report)
}

/// Benchmark name → roster of dataset names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub benchmarks: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub benchmark: String,
    pub macro_average: f64,
    pub per_task: BTreeMap<String, f64>,
    pub datasets: Vec<String>,
}

/// Unweighted mean of headline values per benchmark, with per-task means.
pub fn aggregate_benchmark(
    reports: &[EvalReport],
    grouping: &BenchmarkManifest,
) -> Result<Vec<BenchmarkSummary>, MetricError> {
    let mut by_name: BTreeMap<&str, &EvalReport> = BTreeMap::new();
    for r in reports {
        if by_name.insert(r.dataset.as_str(), r).is_some() {
            return Err(MetricError::DuplicateDataset(r.dataset.clone()));
        }
    }
    let mut out = Vec::new();
    for (bench, roster) in &grouping.benchmarks {
        let mut seen = BTreeSet::new();
        let mut values = Vec::new();
        let mut per_task: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for ds in roster {
            if !seen.insert(ds) {
                return Err(MetricError::DuplicateDataset(ds.clone()));
            }
            let r = by_name.get(ds.as_str()).ok_or_else(|| MetricError::MissingDataset {
                benchmark: bench.clone(),
                dataset: ds.clone(),
            })?;
            values.push(r.value);
            per_task.entry(r.task.short_name().to_string()).or_default().push(r.value);
        }
        if values.is_empty() {
            continue;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        out.push(BenchmarkSummary {
            benchmark: bench.clone(),
            macro_average: mean(&values),
            per_task: per_task.iter().map(|(t, v)| (t.clone(), mean(v))).collect(),
            datasets: roster.clone(),
        });
    }
    Ok(out)
}

/// Plain-text results table: dataset, task, metric, value.
pub fn results_table(reports: &[EvalReport], with_relaxed: bool) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<24} {:<5} {:<12} {:>8}", "dataset", "task", "metric", "value");
    if with_relaxed {
        let _ = write!(out, " {:>10}", "relaxed_f1");
    }
    let _ = writeln!(out, " {:>6} {:>11}", "n", "unscoreable");
    for r in reports {
        let _ = write!(
            out,
            "{:<24} {:<5} {:<12} {:>8.4}",
            r.dataset,
            r.task.short_name(),
            r.metric_name,
            r.value
        );
        if with_relaxed {
            match r.relaxed_f1 {
                Some(v) => {
                    let _ = write!(out, " {v:>10.4}");
                }
                None => {
                    let _ = write!(out, " {:>10}", "-");
                }
            }
        }
        let _ = writeln!(out, " {:>6} {:>11}", r.n_instances, r.n_unscoreable);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(label: &str, s: usize, e: usize) -> EntityMention {
        EntityMention::new(label, "x".repeat(e - s)).with_offsets(s, e)
    }

    #[test]
    fn identity_scores_one() {
        let g = vec![m("Drug", 0, 4)];
        let s = entity_prf(&g, &g, MatchMode::Strict).unwrap();
        assert_eq!((s.overall.precision, s.overall.recall, s.overall.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn strict_versus_relaxed() {
        let p = vec![m("Drug", 0, 4)];
        let g = vec![m("Drug", 0, 10)];
        assert_eq!(entity_prf(&p, &g, MatchMode::Strict).unwrap().overall.f1, 0.0);
        assert_eq!(entity_prf(&p, &g, MatchMode::Relaxed).unwrap().overall.f1, 1.0);
        // Labels still have to agree.
        let other = vec![m("Alcohol", 0, 4)];
        assert_eq!(entity_prf(&other, &g, MatchMode::Relaxed).unwrap().overall.f1, 0.0);
    }

    #[test]
    fn closed_form_counts() {
        let g = vec![m("A", 0, 2), m("A", 5, 7), m("A", 10, 12)];
        let p = vec![m("A", 0, 2), m("A", 20, 22)];
        let s = entity_prf(&p, &g, MatchMode::Strict).unwrap().overall;
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 2));
        assert_eq!(s.precision, 0.5);
        assert!((s.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn unaligned_predictions_are_false_positives() {
        let g = vec![m("A", 0, 2)];
        let p = vec![EntityMention::new("A", "zz")];
        for mode in [MatchMode::Strict, MatchMode::Relaxed] {
            let s = entity_prf(&p, &g, mode).unwrap().overall;
            assert_eq!((s.tp, s.fp, s.fn_), (0, 1, 1));
        }
        assert!(matches!(
            entity_prf(&g, &p, MatchMode::Strict),
            Err(MetricError::MissingGoldOffsets(_))
        ));
    }

    #[test]
    fn token_level() {
        let pos: BTreeSet<String> = ["P".to_string()].into();
        let s = token_prf(&["P", "O", "P"], &["P", "O", "P"], &pos).unwrap();
        assert_eq!(s.f1, 1.0);
        let s = token_prf(&["O", "O", "O"], &["P", "O", "P"], &pos).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = token_prf(&["P", "P", "O"], &["P", "O", "P"], &pos).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 1));
        assert_eq!(s.f1, 0.5);
        assert!(matches!(token_prf(&["P"], &[], &pos), Err(MetricError::LengthMismatch(1, 0))));
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[Some(1), Some(2)], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[Some(2), None], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[Some(1), Some(0), Some(3), None], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert_eq!(accuracy::<i32>(&[], &[]).unwrap_err(), MetricError::EmptyInput);
    }

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn classification_counts() {
        let labels = vec!["neg".to_string(), "pos".to_string()];
        let perfect = classification_prf(
            &[Some(set(&["pos"])), Some(set(&["neg"]))],
            &[set(&["pos"]), set(&["neg"])],
            &labels,
        )
        .unwrap();
        assert!(perfect.per_class.values().all(|s| s.f1 == 1.0));

        let preds = vec![Some(set(&["pos"])); 4];
        let golds = vec![set(&["pos"]), set(&["neg"]), set(&["neg"]), set(&["neg"])];
        let s = classification_prf(&preds, &golds, &labels).unwrap();
        let pos = s.per_class["pos"];
        assert_eq!(pos.precision, 0.25);
        assert_eq!(pos.recall, 1.0);
        assert!((pos.f1 - 0.4).abs() < 1e-15);

        let abc: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let s = classification_prf(&[Some(set(&["A", "C"]))], &[set(&["A"])], &abc).unwrap();
        assert_eq!(s.per_class["A"].tp, 1);
        assert_eq!(s.per_class["C"].fp, 1);

        assert!(matches!(
            classification_prf(&[Some(set(&["Z"]))], &[set(&["A"])], &abc),
            Err(MetricError::UnknownLabel(_))
        ));
    }

    #[test]
    fn pearson_basics() {
        assert_eq!(pearson(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[0.0, 5.0], &[5.0, 0.0]).unwrap(), -1.0);
        assert_eq!(pearson(&[1.0], &[1.0]).unwrap_err(), MetricError::TooFewPoints(1));
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]).unwrap_err(), MetricError::ZeroVariance);
    }

    fn report(ds: &str, task: TaskKind, value: f64) -> EvalReport {
        EvalReport {
            dataset: ds.into(),
            task,
            metric_name: "m".into(),
            value,
            per_class: BTreeMap::new(),
            n_instances: 1,
            n_unscoreable: 0,
            relaxed_f1: None,
        }
    }

    #[test]
    fn aggregation() {
        let reports = vec![
            report("bc5", TaskKind::Ner, 0.2),
            report("ddi", TaskKind::RelationExtraction, 0.8),
            report("hoc", TaskKind::DocumentClassification, 0.5),
        ];
        let grouping = BenchmarkManifest {
            benchmarks: BTreeMap::from([
                ("BLURB".to_string(), vec!["bc5".to_string(), "ddi".to_string()]),
                ("BLUE".to_string(), vec!["ddi".to_string(), "hoc".to_string()]),
                ("ONE".to_string(), vec!["hoc".to_string()]),
            ]),
        };
        let out = aggregate_benchmark(&reports, &grouping).unwrap();
        let get = |n: &str| out.iter().find(|s| s.benchmark == n).unwrap();
        assert!((get("BLURB").macro_average - 0.5).abs() < 1e-15);
        assert!((get("BLUE").macro_average - 0.65).abs() < 1e-15);
        assert_eq!(get("ONE").macro_average, 0.5);
        assert_eq!(get("BLURB").per_task["NER"], 0.2);

        let dup = vec![report("a", TaskKind::Ner, 0.1), report("a", TaskKind::Ner, 0.2)];
        assert!(matches!(
            aggregate_benchmark(&dup, &BenchmarkManifest::default()),
            Err(MetricError::DuplicateDataset(_))
        ));
    }

    #[test]
    fn table_has_relaxed_column_on_request() {
        let mut r = report("bc5", TaskKind::Ner, 0.5);
        r.relaxed_f1 = Some(0.75);
        assert!(results_table(&[r.clone()], true).contains("relaxed_f1"));
        assert!(!results_table(&[r], false).contains("relaxed_f1"));
    }
}
