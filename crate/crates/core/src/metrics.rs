//! Ranking and selective-prediction metrics.
//!
//! Conventions:
//! * uncertainty scores are "higher = more likely hallucinated" and label 1
//!   is the hallucination class;
//! * certainty orders records for rejection, most certain first, ties broken
//!   by record order;
//! * retained accuracy is the fraction of retained records with label 0.

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub id: String,
    pub uncertainty: f64,
    pub label: u8,
}

/// Per-record hallucination scores with their labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredSet {
    pub records: Vec<ScoredRecord>,
}

impl ScoredSet {
    pub fn new(ids: &[String], uncertainty: &[f64], labels: &[u8]) -> Result<Self> {
        if ids.len() != uncertainty.len() || ids.len() != labels.len() {
            return Err(Error::Metric(format!(
                "length mismatch: {} ids, {} scores, {} labels",
                ids.len(),
                uncertainty.len(),
                labels.len()
            )));
        }
        let records = ids
            .iter()
            .zip(uncertainty)
            .zip(labels)
            .map(|((id, &u), &label)| ScoredRecord {
                id: id.clone(),
                uncertainty: u,
                label,
            })
            .collect();
        let set = Self { records };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if !r.uncertainty.is_finite() {
                return Err(Error::Metric(format!("non-finite score for `{}`", r.id)));
            }
            if r.label > 1 {
                return Err(Error::Metric(format!("label {} for `{}` is not 0 or 1", r.label, r.id)));
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.uncertainty).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Writes `id<TAB>score<TAB>label` lines.
    pub fn write_tsv(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            writeln!(out, "{}\t{}\t{}", r.id, r.uncertainty, r.label).map_err(|e| Error::io("<scores>", e))?;
        }
        Ok(())
    }

    pub fn read_tsv(input: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<scores>", e))?;
            if line.is_empty() {
                continue;
            }
            let err = |field: &str, message: String| Error::Parse {
                line: i + 1,
                field: field.into(),
                message,
            };
            let mut cols = line.split('\t');
            let (Some(id), Some(score), Some(label), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(err("line", "expected three tab-separated columns".into()));
            };
            let uncertainty = score.parse().map_err(|e| err("score", format!("{e}")))?;
            let label = match label {
                "0" => 0,
                "1" => 1,
                other => return Err(err("label", format!("`{other}` is not 0 or 1"))),
            };
            records.push(ScoredRecord {
                id: id.to_owned(),
                uncertainty,
                label,
            });
        }
        let set = Self { records };
        set.validate()?;
        Ok(set)
    }
}

/// Distance from the decision boundary of a probability; higher = more certain.
pub fn certainty_supervised(p: f64) -> f64 {
    (p - 0.5).abs()
}

/// Certainty of a min-max normalized uncertainty score.
pub fn certainty_unsupervised(normalized: f64) -> f64 {
    1.0 - normalized
}

/// Rescales to `[0, 1]`; a constant input maps to 0.5 everywhere.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(Ordering::Greater) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|&s| (s - lo) / (hi - lo)).collect()
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_finite(scores)
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Metric(format!("non-finite value {} at record {i}", values[i]))),
        None => Ok(()),
    }
}

fn class_counts(labels: &[u8]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Probability that a random hallucinated record outscores a random faithful
/// one, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUROC needs both labels present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the Mann-Whitney U statistic, kept integral.
    let mut u2: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut group_pos, mut group_neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        u2 += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Indices sorted most-certain first; equal certainties keep record order.
fn certainty_order(certainty: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..certainty.len()).collect();
    order.sort_by(|&a, &b| certainty[b].total_cmp(&certainty[a]).then(Ordering::Equal));
    order
}

/// `faithful[m]` = number of label-0 records among the `m` most certain.
fn faithful_prefix(labels: &[u8], certainty: &[f64]) -> Vec<u64> {
    let mut prefix = Vec::with_capacity(labels.len() + 1);
    prefix.push(0);
    let mut acc = 0;
    for i in certainty_order(certainty) {
        acc += u64::from(labels[i] == 0);
        prefix.push(acc);
    }
    prefix
}

/// `(rejected fraction k/n, retained accuracy)` for `k = 0..n`.
pub fn rejection_accuracy_curve(labels: &[u8], certainty: &[f64]) -> Result<Vec<(f64, f64)>> {
    if labels.len() != certainty.len() {
        return Err(Error::Metric("labels and certainty differ in length".into()));
    }
    check_finite(certainty)?;
    if labels.is_empty() {
        return Err(Error::Metric("rejection curve of an empty set".into()));
    }
    let n = labels.len();
    let prefix = faithful_prefix(labels, certainty);
    Ok((0..n)
        .map(|k| {
            let kept = n - k;
            (k as f64 / n as f64, prefix[kept] as f64 / kept as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuracRule {
    /// Mean of the `n` retained accuracies.
    #[default]
    Rectangle,
    /// Trapezoids between consecutive rejection fractions, normalized by the span covered.
    Trapezoid,
}

pub fn aurac(curve: &[(f64, f64)]) -> Result<f64> {
    aurac_with(curve, AuracRule::Rectangle)
}

pub fn aurac_with(curve: &[(f64, f64)], rule: AuracRule) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Metric("AURAC of an empty curve".into()));
    }
    match rule {
        AuracRule::Rectangle => Ok(curve.iter().map(|&(_, a)| a).sum::<f64>() / curve.len() as f64),
        AuracRule::Trapezoid => {
            if curve.len() == 1 {
                return Ok(curve[0].1);
            }
            let area: f64 = curve
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
                .sum();
            Ok(area / (curve[curve.len() - 1].0 - curve[0].0))
        }
    }
}

/// Retained accuracy over the `ceil(n / 2)` most certain records.
pub fn ra_at_50(labels: &[u8], certainty: &[f64]) -> Result<f64> {
    if labels.len() != certainty.len() {
        return Err(Error::Metric("labels and certainty differ in length".into()));
    }
    check_finite(certainty)?;
    if labels.is_empty() {
        return Err(Error::Metric("RA@50 of an empty set".into()));
    }
    let kept = labels.len().div_ceil(2);
    let prefix = faithful_prefix(labels, certainty);
    Ok(prefix[kept] as f64 / kept as f64)
}

fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// F1 of the hallucination class when predicting positive at `score >= threshold`.
pub fn f1_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Maximum F1 over thresholds at `-inf`, midpoints between consecutive
/// distinct scores, and `+inf`; returns the lowest threshold reaching it.
pub fn f1_at_best(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::Metric("F1@B needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Distinct ascending values with their positive/negative counts.
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let y = labels[i];
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                if y == 1 {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((scores[i], u64::from(y == 1), u64::from(y == 0))),
        }
    }

    // Candidate j predicts positive for every group at index >= j.
    let m = groups.len();
    let mut tp_from = vec![0u64; m + 1];
    let mut fp_from = vec![0u64; m + 1];
    for j in (0..m).rev() {
        tp_from[j] = tp_from[j + 1] + groups[j].1;
        fp_from[j] = fp_from[j + 1] + groups[j].2;
    }
    let threshold_of = |j: usize| match j {
        0 => f64::NEG_INFINITY,
        j if j == m => f64::INFINITY,
        j => (groups[j - 1].0 + groups[j].0) / 2.0,
    };
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for j in 0..=m {
        let f1 = f1_from_counts(tp_from[j], fp_from[j], pos - tp_from[j]);
        if f1 > best.0 {
            best = (f1, threshold_of(j));
        }
    }
    Ok(best)
}

fn ser_threshold<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    // Goes through `Value`: untagged enums cannot see numbers under arbitrary_precision.
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::Number(v) => v
            .as_f64()
            .ok_or_else(|| serde::de::Error::custom(format!("bad threshold `{v}`"))),
        serde_json::Value::String(t) if t == "inf" => Ok(f64::INFINITY),
        serde_json::Value::String(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        other => Err(serde::de::Error::custom(format!("bad threshold `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub n: usize,
    pub auroc: f64,
    pub aurac: f64,
    pub ra_at_50: f64,
    pub f1_at_best: f64,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub f1_best_threshold: f64,
    pub rejection_curve: Vec<(f64, f64)>,
}

/// Computes every metric from uncertainty scores and a certainty ordering.
pub fn evaluate(scorer: &str, uncertainty: &[f64], certainty: &[f64], labels: &[u8]) -> Result<EvalReport> {
    check_lengths(uncertainty, labels)?;
    let curve = rejection_accuracy_curve(labels, certainty)?;
    let (f1, threshold) = f1_at_best(uncertainty, labels)?;
    Ok(EvalReport {
        scorer: scorer.to_owned(),
        n: labels.len(),
        auroc: auroc(uncertainty, labels)?,
        aurac: aurac(&curve)?,
        ra_at_50: ra_at_50(labels, certainty)?,
        f1_at_best: f1,
        f1_best_threshold: threshold,
        rejection_curve: curve,
    })
}

/// Probability scorers: rank by `p`, certainty `|p - 0.5|`.
pub fn evaluate_supervised(scorer: &str, probs: &[f64], labels: &[u8]) -> Result<EvalReport> {
    let certainty: Vec<f64> = probs.iter().map(|&p| certainty_supervised(p)).collect();
    evaluate(scorer, probs, &certainty, labels)
}

/// Raw uncertainty scorers: min-max normalize, certainty `1 - u`.
pub fn evaluate_unsupervised(scorer: &str, raw: &[f64], labels: &[u8]) -> Result<EvalReport> {
    let normalized = min_max_normalize(raw);
    let certainty: Vec<f64> = normalized.iter().map(|&u| certainty_unsupervised(u)).collect();
    evaluate(scorer, &normalized, &certainty, labels)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("eval report: {e}")))
    }

    /// Two whitespace-separated columns: rejected fraction and retained accuracy.
    pub fn curve_text(&self) -> String {
        let mut out = String::from("# rejection_fraction\tretained_accuracy\n");
        for (f, a) in &self.rejection_curve {
            out.push_str(&format!("{f}\t{a}\n"));
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let report = dir.join(format!("{}.report.json", self.scorer));
        std::fs::write(&report, self.to_json() + "\n").map_err(|e| Error::io(&report, e))?;
        let curve = dir.join(format!("{}.curve.tsv", self.scorer));
        std::fs::write(&curve, self.curve_text()).map_err(|e| Error::io(&curve, e))
    }
}
