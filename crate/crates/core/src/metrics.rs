//! Classification metrics over integer labels.
//!
//! Conventions: confusion rows are true labels; a class with no predicted
//! positives has precision 0; F1 is 0 when precision + recall is 0; classes
//! absent from both labels and predictions are left out of macro averages.

use serde::Serialize;

use crate::error::{Error, Result};

fn check_labels(labels: &[usize], k: usize, what: &str) -> Result<()> {
    match labels.iter().position(|&l| l >= k) {
        Some(i) => Err(Error::Data(format!("{what}[{i}] = {} is outside [0, {k})", labels[i]))),
        None => Ok(()),
    }
}

fn check_pair(truth: &[usize], pred: &[usize], k: usize) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Data(format!("{} labels but {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    check_labels(truth, k, "true")?;
    check_labels(pred, k, "pred")
}

/// `k×k` counts, `m[true][pred]`.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    check_pair(truth, pred, k)?;
    let mut m = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Whether the class occurs in the labels or the predictions.
    pub present: Vec<bool>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub fn precision_recall_f1(confusion: &[Vec<u64>]) -> ClassScores {
    let k = confusion.len();
    let mut s = ClassScores {
        precision: vec![0.0; k],
        recall: vec![0.0; k],
        f1: vec![0.0; k],
        present: vec![false; k],
        macro_precision: 0.0,
        macro_recall: 0.0,
        macro_f1: 0.0,
    };
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let actual: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        s.precision[c] = p;
        s.recall[c] = r;
        s.f1[c] = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        s.present[c] = actual + predicted > 0;
    }
    let absent: Vec<usize> = (0..k).filter(|&c| !s.present[c]).collect();
    if !absent.is_empty() {
        log::debug!("classes {absent:?} never occur; left out of macro averages");
    }
    let n = (k - absent.len()).max(1) as f64;
    let mean = |v: &[f64]| (0..k).filter(|&c| s.present[c]).map(|c| v[c]).sum::<f64>() / n;
    s.macro_precision = mean(&s.precision);
    s.macro_recall = mean(&s.recall);
    s.macro_f1 = mean(&s.f1);
    s
}

/// Quadratic weighted kappa with weights `(i−j)²/(k−1)²`.
///
/// When the expected disagreement is zero (both label sets sit on one class)
/// the agreement is perfect by construction and 1.0 is returned.
pub fn qwk(truth: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Data(format!("weighted kappa needs at least 2 classes, got {k}")));
    }
    let o = confusion_matrix(truth, pred, k)?;
    let n = truth.len() as f64;
    let rows: Vec<f64> = o.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| o.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let norm = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2) / norm;
            num += w * o[i][j] as f64;
            den += w * rows[i] * cols[j] / n;
        }
    }
    if den == 0.0 {
        log::debug!("weighted kappa has zero expected disagreement; reporting 1.0");
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

/// Mean absolute difference between class indices.
pub fn mae(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Data(format!("{} labels but {} predictions", truth.len(), pred.len())));
    }
    let total: usize = truth.iter().zip(pred).map(|(&t, &p)| t.abs_diff(p)).sum();
    Ok(total as f64 / truth.len() as f64)
}

/// Midranks (1-based) of `values`; ties share the mean of their positions.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Macro one-vs-rest ROC AUC. `scores` is row-major `[N, k]`.
///
/// Classes without positives or without negatives are skipped; it is an
/// error if that leaves nothing.
pub fn auc_macro_ovr(scores: &[f64], truth: &[usize], k: usize) -> Result<f64> {
    let n = truth.len();
    if n < 2 || scores.len() != n * k {
        return Err(Error::Data(format!(
            "AUC needs at least 2 samples and [N,{k}] scores; got {n} labels, {} scores",
            scores.len()
        )));
    }
    check_labels(truth, k, "true")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut total = 0.0;
    let mut defined = 0usize;
    for c in 0..k {
        let pos = truth.iter().filter(|&&t| t == c).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            log::debug!("AUC for class {c} is undefined ({pos} positives, {neg} negatives); skipped");
            continue;
        }
        let column: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let ranks = midranks(&column);
        let rank_sum: f64 = (0..n).filter(|&i| truth[i] == c).map(|i| ranks[i]).sum();
        let (p, q) = (pos as f64, neg as f64);
        total += (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
        defined += 1;
    }
    if defined == 0 {
        return Err(Error::Data("AUC is undefined: every sample has the same label".into()));
    }
    Ok(total / defined as f64)
}

/// Index of the first maximal entry of each row.
pub fn argmax_rows(scores: &[f64], k: usize) -> Vec<usize> {
    scores
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub qwk: f64,
    pub mae: f64,
    /// `None` when every sample has the same label.
    pub auc: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Builds every metric from class probabilities (`[N,k]`, row-major).
    pub fn from_scores(scores: &[f64], truth: &[usize], k: usize) -> Result<Self> {
        let pred = argmax_rows(scores, k);
        let confusion = confusion_matrix(truth, &pred, k)?;
        let cs = precision_recall_f1(&confusion);
        let auc = match auc_macro_ovr(scores, truth, k) {
            Ok(a) => Some(a),
            Err(Error::Data(msg)) => {
                log::warn!("{msg}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            samples: truth.len(),
            accuracy: accuracy(&confusion),
            precision: cs.precision,
            recall: cs.recall,
            f1: cs.f1,
            macro_precision: cs.macro_precision,
            macro_recall: cs.macro_recall,
            macro_f1: cs.macro_f1,
            qwk: qwk(truth, &pred, k)?,
            mae: mae(truth, &pred)?,
            auc,
            confusion,
        })
    }
}
