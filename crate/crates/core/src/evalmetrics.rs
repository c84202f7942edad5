//! Annotation quality: sample-level F (MF-S), concept-level F (MF-C) and
//! mean average precision (MAP).
//!
//! A concept is predicted present iff its score is strictly positive. AP is
//! the mean of precision at the rank of each positive, with samples sorted by
//! descending score and ties broken by ascending sample index. A precision or
//! recall with an empty denominator is 0, except that an empty predicted set
//! matching an empty true set scores F = 1.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio::LabelMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub concept: String,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    /// `None` when the concept has no positives.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mfs: f64,
    pub mfc: f64,
    #[serde(rename = "map")]
    pub map_: f64,
    pub per_concept: Vec<ConceptMetrics>,
}

fn prf(tp: usize, predicted: usize, actual: usize) -> (f64, f64, f64) {
    if predicted == 0 && actual == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let r = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Average precision of one ranking; `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Evaluate an `N x K` score matrix against ground truth.
pub fn evaluate(scores: &Array2<f64>, truth: &LabelMatrix) -> Result<EvalReport> {
    let (n, k) = scores.dim();
    if (n, k) != (truth.n_images(), truth.n_concepts()) {
        return Err(Error::ShapeMismatch(format!(
            "scores are {n}x{k}, labels are {}x{}",
            truth.n_images(),
            truth.n_concepts()
        )));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    let pred = |i: usize, j: usize| scores[[i, j]] > 0.0;
    let actual = |i: usize, j: usize| truth.get(i, j) > 0.0;

    let mut mfs = 0.0;
    for i in 0..n {
        let tp = (0..k).filter(|&j| pred(i, j) && actual(i, j)).count();
        let np = (0..k).filter(|&j| pred(i, j)).count();
        let na = (0..k).filter(|&j| actual(i, j)).count();
        mfs += prf(tp, np, na).2;
    }
    let mfs = if n == 0 { 0.0 } else { mfs / n as f64 };

    let mut per_concept = Vec::with_capacity(k);
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for j in 0..k {
        let tp = (0..n).filter(|&i| pred(i, j) && actual(i, j)).count();
        let np = (0..n).filter(|&i| pred(i, j)).count();
        let na = (0..n).filter(|&i| actual(i, j)).count();
        let (precision, recall, f) = prf(tp, np, na);
        let column: Vec<f64> = scores.column(j).to_vec();
        let positive: Vec<bool> = (0..n).map(|i| actual(i, j)).collect();
        let ap = average_precision(&column, &positive);
        match ap {
            Some(v) => {
                ap_sum += v;
                ap_count += 1;
            }
            None => log::warn!(
                "concept `{}` has no positives; excluded from MAP",
                truth.concept_names[j]
            ),
        }
        per_concept.push(ConceptMetrics {
            concept: truth.concept_names[j].clone(),
            precision,
            recall,
            f,
            ap,
        });
    }
    let mfc = if k == 0 {
        0.0
    } else {
        per_concept.iter().map(|c| c.f).sum::<f64>() / k as f64
    };
    let map_ = if ap_count == 0 {
        log::warn!("no concept has positives; MAP reported as 0");
        0.0
    } else {
        ap_sum / ap_count as f64
    };
    Ok(EvalReport {
        mfs,
        mfc,
        map_,
        per_concept,
    })
}

impl EvalReport {
    /// One row per concept, then a `__summary__` row carrying MF-S, MF-C and
    /// MAP in their own columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["concept", "precision", "recall", "f", "ap", "mfs", "mfc", "map"])?;
        for c in &self.per_concept {
            w.write_record([
                c.concept.clone(),
                format!("{:.6}", c.precision),
                format!("{:.6}", c.recall),
                format!("{:.6}", c.f),
                c.ap.map_or(String::new(), |v| format!("{v:.6}")),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        w.write_record([
            "__summary__".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format!("{:.6}", self.mfs),
            format!("{:.6}", self.mfc),
            format!("{:.6}", self.map_),
        ])?;
        w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }
}
