//! Classification metrics and fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Row-wise argmax; the first maximum wins.
pub fn argmax_rows(probs: &[Vec<f64>]) -> Vec<usize> {
    probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Unweighted class means of precision, recall and F1, with 0/0 := 0.
pub fn macro_prf(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<(f64, f64, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            op: "macro_prf",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..num_classes {
        let tp = preds.iter().zip(labels).filter(|&(&x, &y)| x == c && y == c).count();
        let predicted = preds.iter().filter(|&&x| x == c).count();
        let actual = labels.iter().filter(|&&y| y == c).count();
        let (pc, rc) = (div(tp, predicted), div(tp, actual));
        p += pc;
        r += rc;
        f += if pc + rc == 0.0 { 0.0 } else { 2.0 * pc * rc / (pc + rc) };
    }
    let k = num_classes as f64;
    Ok((p / k, r / k, f / k))
}

/// Midranks (1-based) of `values`; tied values share their mean rank.
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
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUROC with midrank tie handling; `positive[i]` marks the
/// positive class.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension {
            op: "auroc_binary",
            lhs: vec![scores.len()],
            rhs: vec![positive.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean of one-vs-rest AUROCs over class probability columns.
pub fn auroc_macro_ovr(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    if probs.len() != labels.len() || probs.iter().any(|r| r.len() != num_classes) {
        return Err(Error::Dimension {
            op: "auroc_macro_ovr",
            lhs: vec![probs.len(), probs.first().map_or(0, |r| r.len())],
            rhs: vec![labels.len(), num_classes],
        });
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        if !labels.contains(&c) {
            return Err(Error::UndefinedMetric(format!("class {c} absent from labels")));
        }
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auroc_binary(&scores, &pos)?;
    }
    Ok(total / num_classes as f64)
}

/// Point metrics of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub auroc: f64,
}

impl Metrics {
    pub const KEYS: [&'static str; 5] = ["accuracy", "precision_macro", "recall_macro", "f1_macro", "auroc"];

    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision_macro, self.recall_macro, self.f1_macro, self.auroc]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Metrics {
            accuracy: v[0],
            precision_macro: v[1],
            recall_macro: v[2],
            f1_macro: v[3],
            auroc: v[4],
        }
    }

    /// Metrics of class-probability rows against labels.
    pub fn evaluate(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        let preds = argmax_rows(probs);
        let (p, r, f) = macro_prf(&preds, labels, num_classes)?;
        Ok(Metrics {
            accuracy: accuracy(&preds, labels),
            precision_macro: p,
            recall_macro: r,
            f1_macro: f,
            auroc: auroc_macro_ovr(probs, labels, num_classes)?,
        })
    }

    /// Element-wise mean, e.g. over the two single views. Accumulated as
    /// offsets from the first item so equal inputs give an exact mean.
    pub fn mean_of(items: &[Metrics]) -> Self {
        let base = items[0].values();
        let mut acc = [0.0; 5];
        for m in items {
            for ((a, v), b) in acc.iter_mut().zip(m.values()).zip(base) {
                *a += v - b;
            }
        }
        let n = items.len() as f64;
        Metrics::from_values(std::array::from_fn(|i| {
            let (lo, hi) = items.iter().map(|m| m.values()[i]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            (base[i] + acc[i] / n).clamp(lo, hi)
        }))
    }
}

/// Per-fold metrics with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub mean: Metrics,
    pub std: Metrics,
    pub folds: Vec<Metrics>,
}

pub fn aggregate_folds(folds: &[Metrics]) -> Result<EvalReport> {
    if folds.len() < 2 {
        return Err(Error::Contract(format!("aggregation needs ≥ 2 folds, got {}", folds.len())));
    }
    let n = folds.len() as f64;
    let mean = Metrics::mean_of(folds);
    let mut var = [0.0; 5];
    for f in folds {
        for ((s, v), m) in var.iter_mut().zip(f.values()).zip(mean.values()) {
            *s += (v - m) * (v - m);
        }
    }
    Ok(EvalReport {
        mean,
        std: Metrics::from_values(var.map(|s| (s / (n - 1.0)).sqrt())),
        folds: folds.to_vec(),
    })
}
