//! Confusion counts, one-vs-rest metrics, rank AUC, macro averages and the
//! stratified dataset splitter.

use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::CLASS_LABELS;
use crate::rng::RngState;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("class index {0} out of range")]
    Index(usize),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    Length(usize, usize),
    #[error("score set needs at least one positive and one negative")]
    DegenerateSet,
    #[error("invalid score at position {0}")]
    InvalidScore(usize),
    #[error("probability row {row}: {msg}")]
    Probabilities { row: usize, msg: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("duplicate manifest path `{0}`")]
    DuplicatePath(String),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    Ratios((f64, f64, f64)),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneVsRest {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn one_vs_rest(&self, c: usize) -> OneVsRest {
        let tp = self.counts[c][c];
        let fn_ = self.row_sum(c) - tp;
        let fp = (0..NUM_CLASSES).map(|r| self.counts[r][c]).sum::<u64>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        OneVsRest { tp, fp, fn_, tn }
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::Length(preds.len(), labels.len()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= NUM_CLASSES {
            return Err(MetricsError::Index(p));
        }
        if t >= NUM_CLASSES {
            return Err(MetricsError::Index(t));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// One-vs-rest metrics for a class. A zero denominator yields 0 and the
/// metric's name in `degenerate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub auc: f64,
    pub f1: f64,
    pub degenerate: Vec<String>,
}

impl ClassMetrics {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate.is_empty()
    }
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Recall, precision, accuracy and F1 for class `c`; `auc` is left at 0.
pub fn per_class_metrics(cm: &ConfusionMatrix, c: usize) -> ClassMetrics {
    let OneVsRest { tp, fp, fn_, tn } = cm.one_vs_rest(c);
    let mut flags = Vec::new();
    let accuracy = ratio(tp + tn, tp + tn + fp + fn_, "accuracy", &mut flags);
    let recall = ratio(tp, tp + fn_, "recall", &mut flags);
    let precision = ratio(tp, tp + fp, "precision", &mut flags);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_, "f1", &mut flags);
    ClassMetrics { accuracy, recall, precision, auc: 0.0, f1, degenerate: flags }
}

/// Rank AUC as an exact fraction `(num, den)`. Tied scores share their
/// midrank; the numerator is doubled to stay integral.
pub fn binary_auc_exact(scores: &[f64], positive: &[bool]) -> Result<(u128, u128), MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::Length(scores.len(), positive.len()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::InvalidScore(i));
    }
    let p = positive.iter().filter(|&&b| b).count() as u128;
    let n = scores.len() as u128 - p;
    if p == 0 || n == 0 {
        return Err(MetricsError::DegenerateSet);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share (i + 1 + j) / 2
        let twice_mid = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| positive[k]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j;
    }
    Ok((twice_rank_sum - p * (p + 1), 2 * p * n))
}

pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64, MetricsError> {
    let (num, den) = binary_auc_exact(scores, positive)?;
    Ok(num as f64 / den as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub auc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    /// Fraction of samples whose argmax equals the label.
    pub top1_accuracy: f64,
    /// Unweighted means of the per-class one-vs-rest values.
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub per_class: IndexMap<String, ClassMetrics>,
    pub confusion_matrix: ConfusionMatrix,
}

/// Argmax predictions, per-class one-vs-rest metrics with column-`c` AUC, and
/// their unweighted means.
pub fn macro_metrics(probabilities: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<EvalReport, MetricsError> {
    if probabilities.len() != labels.len() {
        return Err(MetricsError::Length(probabilities.len(), labels.len()));
    }
    for (row, p) in probabilities.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::Probabilities { row, msg: "non-finite value".into() });
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(MetricsError::Probabilities { row, msg: format!("sums to {s}") });
        }
    }
    let preds: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let cm = confusion_matrix(&preds, labels)?;
    let mut per_class = IndexMap::new();
    for (c, name) in CLASS_LABELS.iter().enumerate() {
        let mut m = per_class_metrics(&cm, c);
        let scores: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match binary_auc(&scores, &pos) {
            Ok(a) => m.auc = a,
            Err(MetricsError::DegenerateSet) => m.degenerate.push("auc".into()),
            Err(e) => return Err(e),
        }
        per_class.insert(name.to_string(), m);
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let macro_avg = MacroMetrics {
        accuracy: mean(|m| m.accuracy),
        recall: mean(|m| m.recall),
        precision: mean(|m| m.precision),
        auc: mean(|m| m.auc),
        f1: mean(|m| m.f1),
    };
    let n = labels.len();
    let top1_accuracy = if n == 0 { 0.0 } else { cm.trace() as f64 / n as f64 };
    Ok(EvalReport { sample_count: n, top1_accuracy, macro_avg, per_class, confusion_matrix: cm })
}

pub fn label_index(label: &str) -> Option<usize> {
    CLASS_LABELS.iter().position(|&l| l == label)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses JSON Lines; blank lines are skipped. Labels must be one of the
    /// four classes and paths must be unique.
    pub fn from_jsonl(text: &str) -> Result<Self, MetricsError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|err| MetricsError::Manifest { line: i + 1, msg: err.to_string() })?;
            if label_index(&e.label).is_none() {
                return Err(MetricsError::Manifest { line: i + 1, msg: format!("unknown label `{}`", e.label) });
            }
            if !seen.insert(e.path.clone()) {
                return Err(MetricsError::DuplicatePath(e.path));
            }
            entries.push(e);
        }
        Ok(Self { entries })
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("entry serializes") + "\n").collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| label_index(&e.label).expect("validated label")).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for i in self.label_indices() {
            c[i] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
    pub warnings: Vec<String>,
}

impl Split {
    /// Rows train, val, test; columns in class order.
    pub fn counts(&self) -> [[usize; NUM_CLASSES]; 3] {
        [self.train.class_counts(), self.val.class_counts(), self.test.class_counts()]
    }
}

/// Per-class sizes: `floor(r_train * n)`, `floor(r_val * n)`, remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // the epsilon keeps products such as 0.1 * 830 from landing just under an integer
    let train = ((ratios.0 * n as f64) + 1e-9).floor() as usize;
    let val = (((ratios.1 * n as f64) + 1e-9).floor() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Shuffles each class with `RngState::new(seed ^ class_index)` (Fisher-Yates,
/// high index first), cuts it by [`split_sizes`] and restores manifest order
/// inside every split.
pub fn stratified_split(m: &Manifest, ratios: (f64, f64, f64), seed: u64) -> Result<Split, MetricsError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(MetricsError::Ratios(ratios));
    }
    let labels = m.label_indices();
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut warnings = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            let msg = format!("class `{}` has no samples", CLASS_LABELS[class]);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mut rng = RngState::new(seed ^ class as u64);
        for i in (1..idx.len()).rev() {
            let j = rng.next_below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        let (tr, va, _) = split_sizes(idx.len(), ratios);
        parts[0].extend_from_slice(&idx[..tr]);
        parts[1].extend_from_slice(&idx[tr..tr + va]);
        parts[2].extend_from_slice(&idx[tr + va..]);
    }
    let take = |mut v: Vec<usize>| {
        v.sort_unstable();
        Manifest { entries: v.into_iter().map(|i| m.entries[i].clone()).collect() }
    };
    let [train, val, test] = parts;
    Ok(Split { train: take(train), val: take(val), test: take(test), warnings })
}
