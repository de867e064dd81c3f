//! Accuracy, balanced accuracy and macro-F1 from a confusion matrix.

use crate::error::{Error, Result};

/// Row = true grade, column = predicted grade.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub grades: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn from_pairs(truth: &[usize], predicted: &[usize], grades: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim(
                "confusion",
                format!("{} truths for {} predictions", truth.len(), predicted.len()),
            ));
        }
        let mut counts = vec![0u64; grades * grades];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= grades || p >= grades {
                return Err(Error::Contract(format!(
                    "grade pair ({t}, {p}) out of range for {grades} grades"
                )));
            }
            counts[t * grades + p] += 1;
        }
        Ok(Confusion { grades, counts })
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.grades + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.grades).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.grades).map(|t| self.get(t, predicted)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth");
        for p in 0..self.grades {
            s.push_str(&format!(",pred{p}"));
        }
        s.push('\n');
        for t in 0..self.grades {
            s.push_str(&t.to_string());
            for p in 0..self.grades {
                s.push_str(&format!(",{}", self.get(t, p)));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Mean recall over grades present in the truth set.
    pub balanced_accuracy: f64,
    /// Mean F1 over all grades; a grade with zero precision and recall
    /// scores 0.
    pub macro_f1: f64,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let n = confusion.total();
        if n == 0 {
            return Err(Error::Contract("metrics need at least one sample".into()));
        }
        let k = confusion.grades;
        let hits: u64 = (0..k).map(|g| confusion.get(g, g)).sum();
        let mut recall_sum = 0.0;
        let mut present = 0usize;
        let mut f1_sum = 0.0;
        for g in 0..k {
            let tp = confusion.get(g, g) as f64;
            let actual = confusion.row_sum(g);
            let called = confusion.col_sum(g);
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            let precision = if called > 0 { tp / called as f64 } else { 0.0 };
            if actual > 0 {
                recall_sum += recall;
                present += 1;
            }
            if precision + recall > 0.0 {
                f1_sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        Ok(MetricsReport {
            accuracy: hits as f64 / n as f64,
            balanced_accuracy: recall_sum / present as f64,
            macro_f1: f1_sum / k as f64,
            confusion,
        })
    }

    pub fn compute(truth: &[usize], predicted: &[usize], grades: usize) -> Result<Self> {
        MetricsReport::from_confusion(Confusion::from_pairs(truth, predicted, grades)?)
    }

    pub const CSV_HEADER: &'static str = "n,accuracy,balanced_accuracy,macro_f1";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.confusion.total(),
            self.accuracy,
            self.balanced_accuracy,
            self.macro_f1
        )
    }
}
