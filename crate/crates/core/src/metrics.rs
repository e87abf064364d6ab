//! Classification and ordinal agreement metrics computed from a confusion
//! matrix.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::losses::LossBreakdown;
use crate::scalar::Scalar;

/// Square count matrix, rows indexed by true grade and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != classes) {
            return Err(Error::Shape {
                op: "confusion matrix",
                lhs: vec![classes, classes],
                rhs: vec![bad.len()],
            });
        }
        Ok(Self {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape {
                op: "confusion matrix",
                lhs: vec![truth.len()],
                rhs: vec![predicted.len()],
            });
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return contract(format!(
                "grade pair ({truth}, {predicted}) out of range for {} classes",
                self.classes
            ));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|i| (0..self.classes).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    fn require_samples(&self, op: &str) -> Result<u64> {
        match self.total() {
            0 => contract(format!("{op} needs at least one evaluated sample")),
            n => Ok(n),
        }
    }
}

/// Quadratic weighted kappa with weights `(i−j)²/(C−1)²`.
///
/// When the expected disagreement is zero (both marginals on one grade) the
/// result is 1 if nothing disagrees.
pub fn qwk<T: Scalar>(cm: &ConfusionMatrix) -> Result<T> {
    let n = cm.require_samples("qwk")?;
    let c = cm.classes();
    if c < 2 {
        return contract("qwk needs at least two classes");
    }
    let total = T::from_u64(n).unwrap_or_else(T::infinity);
    let rows: Vec<T> = cm
        .row_totals()
        .into_iter()
        .map(|v| T::from_u64(v).unwrap())
        .collect();
    let cols: Vec<T> = cm
        .col_totals()
        .into_iter()
        .map(|v| T::from_u64(v).unwrap())
        .collect();
    let span = T::from_usize_lossy(c - 1);
    let (mut observed, mut expected) = (T::zero(), T::zero());
    for i in 0..c {
        for j in 0..c {
            let gap = (T::from_usize_lossy(i) - T::from_usize_lossy(j)) / span;
            let w = gap * gap;
            observed += w * T::from_u64(cm.get(i, j)).unwrap() / total;
            expected += w * rows[i] * cols[j] / (total * total);
        }
    }
    if expected == T::zero() {
        return if observed == T::zero() {
            Ok(T::one())
        } else {
            contract("qwk: zero expected disagreement with nonzero observed disagreement")
        };
    }
    Ok(T::one() - observed / expected)
}

/// Fraction of samples on the diagonal.
pub fn accuracy<T: Scalar>(cm: &ConfusionMatrix) -> Result<T> {
    let n = cm.require_samples("accuracy")?;
    let hits: u64 = (0..cm.classes()).map(|i| cm.get(i, i)).sum();
    Ok(T::from_u64(hits).unwrap() / T::from_u64(n).unwrap())
}

/// Unweighted mean of per-class F1. A class that never occurs in truth or
/// predictions scores 0 and still counts toward the mean.
pub fn macro_f1<T: Scalar>(cm: &ConfusionMatrix) -> Result<T> {
    cm.require_samples("macro_f1")?;
    let c = cm.classes();
    let rows = cm.row_totals();
    let cols = cm.col_totals();
    let mut sum = T::zero();
    for k in 0..c {
        let tp = cm.get(k, k);
        let denom = rows[k] + cols[k];
        if denom > 0 {
            sum += T::lit(2.0) * T::from_u64(tp).unwrap() / T::from_u64(denom).unwrap();
        }
    }
    Ok(sum / T::from_usize_lossy(c))
}

/// Metrics and mean loss terms for one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub split: String,
    pub qwk: f64,
    pub acc: f64,
    pub macro_f1: f64,
    pub loss: LossBreakdown<f64>,
    pub confusion: ConfusionMatrix,
    pub lr: f64,
}

impl MetricsReport {
    pub fn from_confusion(
        epoch: usize,
        split: impl Into<String>,
        confusion: ConfusionMatrix,
        loss: LossBreakdown<f64>,
        lr: f64,
    ) -> Result<Self> {
        Ok(Self {
            epoch,
            split: split.into(),
            qwk: qwk(&confusion)?,
            acc: accuracy(&confusion)?,
            macro_f1: macro_f1(&confusion)?,
            loss,
            confusion,
            lr,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn csv_header() -> String {
        format!(
            "epoch,split,qwk,acc,macro_f1,lr,{}",
            LossBreakdown::<f64>::CSV_HEADER
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.qwk,
            self.acc,
            self.macro_f1,
            self.lr,
            self.loss.csv_fields()
        )
    }
}

/// CSV document with a header and one row per report.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = MetricsReport::csv_header();
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn brute_qwk(rows: &[Vec<u64>]) -> f64 {
        let c = rows.len();
        let n: f64 = rows.iter().flatten().map(|&v| v as f64).sum();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..c {
            for j in 0..c {
                let w = ((i as f64 - j as f64) / (c as f64 - 1.0)).powi(2);
                let ri: f64 = rows[i].iter().map(|&v| v as f64).sum();
                let cj: f64 = rows.iter().map(|r| r[j] as f64).sum();
                num += w * rows[i][j] as f64;
                den += w * ri * cj / n;
            }
        }
        1.0 - num / den
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = cm(&[&[3, 0, 0], &[0, 4, 0], &[0, 0, 1]]);
        assert_eq!(qwk::<f64>(&m).unwrap(), 1.0);
        assert_eq!(accuracy::<f64>(&m).unwrap(), 1.0);
        assert_eq!(macro_f1::<f64>(&m).unwrap(), 1.0);
    }

    #[test]
    fn chance_agreement_is_zero() {
        let m = cm(&[&[5, 5], &[5, 5]]);
        assert!(qwk::<f64>(&m).unwrap().abs() < 1e-15);
        assert_eq!(accuracy::<f64>(&cm(&[&[1, 1], &[1, 1]])).unwrap(), 0.5);
        assert_eq!(macro_f1::<f64>(&cm(&[&[1, 1], &[1, 1]])).unwrap(), 0.5);
    }

    #[test]
    fn three_class_matches_brute_force() {
        let rows = vec![vec![2, 0, 0], vec![0, 0, 2], vec![0, 0, 0]];
        let m = ConfusionMatrix::from_rows(&rows).unwrap();
        assert!((qwk::<f64>(&m).unwrap() - brute_qwk(&rows)).abs() < 1e-12);
    }

    #[test]
    fn all_predicted_zero() {
        let m = cm(&[&[2, 0], &[2, 0]]);
        assert!((macro_f1::<f64>(&m).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((accuracy::<f64>(&cm(&[&[9, 1], &[0, 0]])).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn single_grade_everywhere_is_perfect() {
        let m = cm(&[&[0, 0], &[0, 6]]);
        assert_eq!(qwk::<f64>(&m).unwrap(), 1.0);
    }

    #[test]
    fn empty_matrix_rejected() {
        let m = ConfusionMatrix::new(3);
        assert!(qwk::<f64>(&m).is_err());
        assert!(accuracy::<f64>(&m).is_err());
        assert!(macro_f1::<f64>(&m).is_err());
    }

    #[test]
    fn from_predictions_counts() {
        let m = ConfusionMatrix::from_predictions(&[0, 1, 1, 2], &[0, 2, 1, 2], 3).unwrap();
        assert_eq!(m.get(1, 2), 1);
        assert_eq!(m.total(), 4);
        assert!(ConfusionMatrix::from_predictions(&[3], &[0], 3).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let m = cm(&[&[3, 1, 0], &[1, 2, 1], &[0, 1, 4]]);
        let mut loss = LossBreakdown::zeroed();
        loss.recon = 0.1 + 0.2;
        loss.total = 1.0 / 3.0;
        let r = MetricsReport::from_confusion(4, "val", m, loss, 1e-4).unwrap();
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(r, back);
        assert_eq!(reports_to_csv(&[r.clone(), r]).lines().count(), 3);
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..8).prop_flat_map(|c| prop::collection::vec(prop::collection::vec(0u64..20, c), c))
    }

    proptest! {
        #[test]
        fn metrics_in_range(rows in matrix_strategy()) {
            let m = ConfusionMatrix::from_rows(&rows).unwrap();
            prop_assume!(m.total() > 0);
            let q = qwk::<f64>(&m).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&q));
            let a = accuracy::<f64>(&m).unwrap();
            let f = macro_f1::<f64>(&m).unwrap();
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&f));
        }

        #[test]
        fn qwk_invariant_under_grade_reversal(rows in matrix_strategy()) {
            let m = ConfusionMatrix::from_rows(&rows).unwrap();
            prop_assume!(m.total() > 0);
            let c = rows.len();
            let reversed: Vec<Vec<u64>> = (0..c)
                .map(|i| (0..c).map(|j| rows[c - 1 - i][c - 1 - j]).collect())
                .collect();
            let r = ConfusionMatrix::from_rows(&reversed).unwrap();
            prop_assert!((qwk::<f64>(&m).unwrap() - qwk::<f64>(&r).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn qwk_ordinal_monotone(truth in prop::collection::vec(0usize..4, 4..60)) {
            // Shifting by +k without clamping needs C ≥ 4 + 2 slots.
            let c = 6;
            let shifted = |k: usize| -> f64 {
                let pred: Vec<usize> = truth.iter().map(|&t| t + k).collect();
                qwk(&ConfusionMatrix::from_predictions(&truth, &pred, c).unwrap()).unwrap()
            };
            prop_assume!(truth.iter().any(|&t| t != truth[0]));
            let (q0, q1, q2) = (shifted(0), shifted(1), shifted(2));
            prop_assert!(q0 > q1 && q1 > q2, "{q0} {q1} {q2}");
        }
    }
}
