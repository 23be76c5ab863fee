use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoning::Answer;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no records to score")]
    EmptyRecordSet,
    #[error("ROC-AUC needs both positive and negative examples")]
    SingleClassSet,
    #[error("record {0} has no gold label")]
    MissingLabel(String),
    #[error("record {0} has no reference answers")]
    MissingReferences(String),
    #[error("record {0} has no positive score")]
    MissingScore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    MeanPerClass,
    VqaAccuracy,
    RocAuc,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Accuracy => "accuracy",
            Self::MeanPerClass => "mean-per-class",
            Self::VqaAccuracy => "vqa-accuracy",
            Self::RocAuc => "roc-auc",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Gold {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// One scored example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub image_id: String,
    pub predicted: Answer,
    pub gold: Gold,
    /// In `[0, 1]`; for ROC-AUC tasks the raw positive score.
    pub per_example_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EvalRecord {
    fn label(&self) -> Result<&str, MetricError> {
        self.gold
            .label
            .as_deref()
            .ok_or_else(|| MetricError::MissingLabel(self.example_id.clone()))
    }

    fn is_correct(&self) -> Result<bool, MetricError> {
        Ok(self.failure.is_none() && self.predicted.text == self.label()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricKind,
    pub value: f64,
    pub n: usize,
    pub failures: usize,
    pub config_fingerprint: String,
}

impl MetricResult {
    pub fn percent(&self) -> f64 {
        self.value * 100.0
    }
}

fn non_empty(records: &[EvalRecord]) -> Result<(), MetricError> {
    if records.is_empty() {
        Err(MetricError::EmptyRecordSet)
    } else {
        Ok(())
    }
}

/// Fraction of records whose predicted text equals the gold label exactly.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64, MetricError> {
    non_empty(records)?;
    let mut correct = 0usize;
    for r in records {
        correct += usize::from(r.is_correct()?);
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Unweighted mean of per-class accuracies over the classes present in the
/// gold labels.
pub fn mean_per_class_accuracy(records: &[EvalRecord]) -> Result<f64, MetricError> {
    non_empty(records)?;
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = per_class.entry(r.label()?).or_default();
        entry.0 += usize::from(r.is_correct()?);
        entry.1 += 1;
    }
    let sum: f64 = per_class.values().map(|(c, n)| *c as f64 / *n as f64).sum();
    Ok(sum / per_class.len() as f64)
}

/// `min(#matching references / 3, 1)` for one prediction, after answer
/// normalization on both sides.
pub fn vqa_score(predicted: &str, references: &[String]) -> f64 {
    let p = normalize_answer(predicted);
    let matches = references
        .iter()
        .filter(|r| normalize_answer(r) == p)
        .count();
    (matches as f64 / 3.0).min(1.0)
}

pub fn vqa_accuracy(records: &[EvalRecord]) -> Result<f64, MetricError> {
    non_empty(records)?;
    let mut total = 0.0;
    for r in records {
        if r.gold.answers.is_empty() {
            return Err(MetricError::MissingReferences(r.example_id.clone()));
        }
        if r.failure.is_none() {
            total += vqa_score(&r.predicted.text, &r.gold.answers);
        }
    }
    Ok(total / records.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in O(n log n).
pub fn roc_auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    if scores.is_empty() {
        return Err(MetricError::EmptyRecordSet);
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClassSet);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC-AUC of the records' positive scores against `label == positive_label`.
pub fn roc_auc(records: &[EvalRecord], positive_label: &str) -> Result<f64, MetricError> {
    non_empty(records)?;
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        let s = r
            .predicted
            .positive_score
            .ok_or_else(|| MetricError::MissingScore(r.example_id.clone()))?;
        scores.push(s);
        labels.push(r.label()? == positive_label);
    }
    roc_auc_scores(&scores, &labels)
}

// Punctuation handled by the standard VQA evaluation script. Periods and
// apostrophes are treated separately.
const PUNCT: &[char] = &[
    ';', '/', '[', ']', '"', '{', '}', '(', ')', '=', '+', '\\', '_', '-', '>', '<', '@', '`', ',',
    '?', '!',
];

const NUMBER_WORDS: &[(&str, &str)] = &[
    ("none", "0"),
    ("zero", "0"),
    ("one", "1"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("five", "5"),
    ("six", "6"),
    ("seven", "7"),
    ("eight", "8"),
    ("nine", "9"),
    ("ten", "10"),
];

const ARTICLES: &[&str] = &["a", "an", "the"];

const CONTRACTIONS: &[(&str, &str)] = &[
    ("aint", "ain't"),
    ("arent", "aren't"),
    ("cant", "can't"),
    ("couldnt", "couldn't"),
    ("didnt", "didn't"),
    ("doesnt", "doesn't"),
    ("dont", "don't"),
    ("hasnt", "hasn't"),
    ("havent", "haven't"),
    ("isnt", "isn't"),
    ("shouldnt", "shouldn't"),
    ("thats", "that's"),
    ("theres", "there's"),
    ("wasnt", "wasn't"),
    ("werent", "weren't"),
    ("whats", "what's"),
    ("wont", "won't"),
    ("wouldnt", "wouldn't"),
    ("youre", "you're"),
];

fn has_digit_comma_digit(s: &str) -> bool {
    let c: Vec<char> = s.chars().collect();
    c.windows(3)
        .any(|w| w[0].is_ascii_digit() && w[1] == ',' && w[2].is_ascii_digit())
}

fn strip_punctuation(s: &str) -> String {
    let digit_comma = has_digit_comma_digit(s);
    let mut out = s.to_string();
    for &p in PUNCT {
        if !out.contains(p) {
            continue;
        }
        let attached_to_space = s.contains(&format!("{p} ")) || s.contains(&format!(" {p}"));
        let replacement = if attached_to_space || digit_comma {
            ""
        } else {
            " "
        };
        out = out.replace(p, replacement);
    }
    // Periods go unless they precede a digit ("2.5" survives).
    let chars: Vec<char> = out.chars().collect();
    chars
        .iter()
        .enumerate()
        .filter(|(i, c)| **c != '.' || chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()))
        .map(|(_, c)| *c)
        .collect()
}

/// Answer normalization of the standard VQA evaluation: lowercase,
/// punctuation stripping, number words to digits, articles dropped, common
/// contractions restored, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.replace(['\n', '\t'], " ").trim().to_lowercase();
    let stripped = strip_punctuation(&lowered);
    stripped
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .map(|w| {
            NUMBER_WORDS
                .iter()
                .chain(CONTRACTIONS)
                .find(|(k, _)| *k == w)
                .map_or(w, |(_, v)| v)
        })
        .collect::<Vec<_>>()
        .join(" ")
}
