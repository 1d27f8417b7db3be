//! Confusion matrix, quadratic weighted kappa, accuracy and macro-F1.
//!
//! Metrics are fractions; percentage formatting happens in the CLI tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `k×k` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<u64>>", try_from = "Vec<Vec<u64>>")]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl From<ConfusionMatrix> for Vec<Vec<u64>> {
    fn from(cm: ConfusionMatrix) -> Self {
        cm.counts.chunks(cm.k.max(1)).map(|r| r.to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<u64>>> for ConfusionMatrix {
    type Error = String;

    fn try_from(rows: Vec<Vec<u64>>) -> Result<Self, String> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err("confusion matrix must be square".into());
        }
        Ok(Self {
            k,
            counts: rows.into_iter().flatten().collect(),
        })
    }
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::LengthMismatch {
                what: "confusion counts",
                left: counts.len(),
                right: k * k,
            });
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.k)
            .map(|i| (0..self.k).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k)
            .map(|j| (0..self.k).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for class in [truth, pred] {
            if class >= self.k {
                return Err(Error::ClassOutOfRange { class, k: self.k });
            }
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }
}

pub fn confusion_matrix(truths: &[usize], preds: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(Error::LengthMismatch {
            what: "confusion_matrix",
            left: truths.len(),
            right: preds.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truths.iter().zip(preds) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

/// `κ = 1 − Σ w·O / Σ w·E` with `w_ij = (i−j)²/(k−1)²` and `E` the outer
/// product of the marginals scaled to the observed total.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k();
    let total = cm.total();
    if total == 0 {
        return Err(Error::KappaUndefined("confusion matrix is empty"));
    }
    if k < 2 {
        return Err(Error::KappaUndefined("fewer than two classes"));
    }
    let n = total as f64;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let norm = ((k - 1) * (k - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            let w = ((i as f64 - j as f64).powi(2)) / norm;
            num += w * cm.get(i, j) as f64;
            den += w * (r as f64 * c as f64) / n;
        }
    }
    if den == 0.0 {
        return Err(Error::KappaUndefined(
            "truths and predictions all fall in one class (zero expected disagreement)",
        ));
    }
    Ok(1.0 - num / den)
}

/// `(trace/total, mean per-class F1)`; a class with no support and no predictions scores 0.
pub fn accuracy_and_macro_f1(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("accuracy_and_macro_f1"));
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let k = cm.k();
    let f1_sum: f64 = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let denom = rows[c] + cols[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok((cm.trace() as f64 / total as f64, f1_sum / k as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kappa: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let kappa = quadratic_weighted_kappa(&confusion)?;
        let (accuracy, macro_f1) = accuracy_and_macro_f1(&confusion)?;
        Ok(Self {
            kappa,
            accuracy,
            macro_f1,
            n_samples: confusion.total() as usize,
            confusion,
        })
    }

    pub fn from_predictions(truths: &[usize], preds: &[usize], k: usize) -> Result<Self> {
        Self::from_confusion(confusion_matrix(truths, preds, k)?)
    }

    pub fn is_finite(&self) -> bool {
        self.kappa.is_finite() && self.accuracy.is_finite() && self.macro_f1.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_empty() {
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
        let empty = confusion_matrix(&[], &[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(empty.counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn direct_tally() {
        let cm = confusion_matrix(&[0, 2, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(2, 1), cm.get(2, 2)), (1, 1, 1));
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn out_of_range_class() {
        assert!(matches!(
            confusion_matrix(&[0, 3], &[0, 1], 3),
            Err(Error::ClassOutOfRange { class: 3, k: 3 })
        ));
    }

    #[test]
    fn perfect_kappa_and_scores() {
        let cm = confusion_matrix(&[0, 1, 2, 3, 4, 4], &[0, 1, 2, 3, 4, 4], 5).unwrap();
        assert_eq!(quadratic_weighted_kappa(&cm).unwrap(), 1.0);
        assert_eq!(accuracy_and_macro_f1(&cm).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn anti_diagonal_two_class() {
        let cm = ConfusionMatrix::from_counts(2, vec![0, 3, 3, 0]).unwrap();
        assert_eq!(quadratic_weighted_kappa(&cm).unwrap(), -1.0);
    }

    #[test]
    fn undefined_kappa_is_an_error() {
        let cm = confusion_matrix(&[1, 1], &[1, 1], 3).unwrap();
        assert!(matches!(
            quadratic_weighted_kappa(&cm),
            Err(Error::KappaUndefined(_))
        ));
        assert!(quadratic_weighted_kappa(&ConfusionMatrix::zeros(3)).is_err());
    }

    #[test]
    fn accuracy_two_thirds() {
        let cm = confusion_matrix(&[0, 2, 2], &[0, 1, 2], 3).unwrap();
        let (acc, _) = accuracy_and_macro_f1(&cm).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy_and_macro_f1(&ConfusionMatrix::zeros(2)).is_err());
    }

    #[test]
    fn report_json_field_names() {
        let r = EvalReport::from_predictions(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["kappa", "accuracy", "macro_f1", "confusion", "n_samples"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["confusion"], serde_json::json!([[1, 0], [1, 1]]));
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
