//! Accuracy matrix and the metrics derived from it.
//!
//! `A[t][j]` is the accuracy on task `j`'s test set after learning task `t`
//! (`j <= t`). Backward transfer and forgetting follow the usual
//! GEM-style definitions over the final row and the diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    num_tasks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub last_acc: f64,
    pub avg_acc: f64,
    /// `None` for single-task runs.
    pub bwt: Option<f64>,
    pub forgetting: Option<f64>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self { rows: Vec::with_capacity(num_tasks), num_tasks }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    /// Appends row `t`, which must hold exactly `t + 1` values in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.num_tasks {
            return Err(Error::InvalidArgument(format!("matrix already has {} rows", self.num_tasks)));
        }
        if row.len() != t + 1 {
            return Err(Error::Shape(format!("row {t} needs {} entries, got {}", t + 1, row.len())));
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("row {t} has values outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// One line per learned task, comma separated, lower triangle only.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Serde(format!("matrix csv: {e}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn summary(&self) -> Result<MetricsSummary> {
        let multi = self.num_tasks >= 2;
        Ok(MetricsSummary {
            last_acc: last_accuracy(self)?,
            avg_acc: average_accuracy(self)?,
            bwt: if multi { Some(backward_transfer(self)?) } else { None },
            forgetting: if multi { Some(forgetting(self)?) } else { None },
        })
    }

    fn require_complete(&self) -> Result<()> {
        if self.num_tasks == 0 || !self.is_complete() {
            return Err(Error::UndefinedMetric(format!(
                "accuracy matrix has {} of {} rows",
                self.rows.len(),
                self.num_tasks
            )));
        }
        Ok(())
    }
}

/// Mean accuracy over all tasks after the final task.
pub fn last_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    a.require_complete()?;
    let last = a.rows.last().expect("complete");
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over stages of the mean accuracy on tasks seen so far.
pub fn average_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    a.require_complete()?;
    let per_stage: f64 = a.rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).sum();
    Ok(per_stage / a.rows.len() as f64)
}

/// `1/(T-1) * sum_{j<T-1} (A[T-1][j] - A[j][j])`.
pub fn backward_transfer(a: &AccuracyMatrix) -> Result<f64> {
    a.require_complete()?;
    let t = a.num_tasks;
    if t < 2 {
        return Err(Error::UndefinedMetric("backward transfer needs at least two tasks".into()));
    }
    let last = &a.rows[t - 1];
    let s: f64 = (0..t - 1).map(|j| last[j] - a.rows[j][j]).sum();
    Ok(s / (t - 1) as f64)
}

/// `1/(T-1) * sum_{j<T-1} (max_{t>=j} A[t][j] - A[T-1][j])`.
pub fn forgetting(a: &AccuracyMatrix) -> Result<f64> {
    a.require_complete()?;
    let t = a.num_tasks;
    if t < 2 {
        return Err(Error::UndefinedMetric("forgetting needs at least two tasks".into()));
    }
    let last = &a.rows[t - 1];
    let s: f64 = (0..t - 1)
        .map(|j| {
            let best = (j..t).map(|r| a.rows[r][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Ok(s / (t - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: Vec<Vec<f64>>) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn last_accuracy_examples() {
        assert!((last_accuracy(&m(vec![vec![0.9], vec![0.8, 0.7]])).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(last_accuracy(&m(vec![vec![1.0], vec![1.0, 1.0]])).unwrap(), 1.0);
        assert_eq!(last_accuracy(&m(vec![vec![0.37]])).unwrap(), 0.37);
    }

    #[test]
    fn incomplete_matrix_is_an_error() {
        let mut a = AccuracyMatrix::new(3);
        a.push_row(vec![0.5]).unwrap();
        assert!(last_accuracy(&a).is_err());
        assert!(average_accuracy(&a).is_err());
        assert!(a.push_row(vec![0.5]).is_err());
        assert!(a.push_row(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn average_accuracy_examples() {
        assert!((average_accuracy(&m(vec![vec![0.9], vec![0.8, 0.7]])).unwrap() - 0.825).abs() < 1e-12);
        let c = m(vec![vec![0.4], vec![0.4, 0.4], vec![0.4, 0.4, 0.4]]);
        assert!((average_accuracy(&c).unwrap() - 0.4).abs() < 1e-12);
        let one = m(vec![vec![0.66]]);
        assert_eq!(average_accuracy(&one).unwrap(), last_accuracy(&one).unwrap());
    }

    #[test]
    fn bwt_and_forgetting_examples() {
        let a = m(vec![vec![1.0], vec![0.6, 1.0]]);
        assert!((backward_transfer(&a).unwrap() + 0.4).abs() < 1e-12);
        assert!((forgetting(&a).unwrap() - 0.4).abs() < 1e-12);
        let flat = m(vec![vec![0.7], vec![0.7, 0.5], vec![0.7, 0.5, 0.9]]);
        assert_eq!(backward_transfer(&flat).unwrap(), 0.0);
        assert_eq!(forgetting(&flat).unwrap(), 0.0);
        assert!(matches!(backward_transfer(&m(vec![vec![0.5]])), Err(Error::UndefinedMetric(_))));
        assert!(forgetting(&m(vec![vec![0.5]])).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let a = m(vec![vec![0.9], vec![0.8, 0.7]]);
        assert_eq!(AccuracyMatrix::from_csv(&a.to_csv()).unwrap(), a);
    }

    fn lower_triangular() -> impl Strategy<Value = AccuracyMatrix> {
        (1usize..6).prop_flat_map(|t| {
            proptest::collection::vec(0.0f64..=1.0, t * (t + 1) / 2).prop_map(move |vals| {
                let mut it = vals.into_iter();
                let rows = (0..t).map(|r| (0..=r).map(|_| it.next().unwrap()).collect()).collect();
                AccuracyMatrix::from_rows(rows).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn scaling_is_linear(a in lower_triangular(), c in 0.0f64..=1.0) {
            let scaled = AccuracyMatrix::from_rows(
                a.rows().iter().map(|r| r.iter().map(|v| v * c).collect()).collect(),
            ).unwrap();
            prop_assert!((last_accuracy(&scaled).unwrap() - c * last_accuracy(&a).unwrap()).abs() < 1e-12);
            prop_assert!((average_accuracy(&scaled).unwrap() - c * average_accuracy(&a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn forgetting_bounds(a in lower_triangular()) {
            prop_assume!(a.num_tasks() >= 2);
            let f = forgetting(&a).unwrap();
            let b = backward_transfer(&a).unwrap();
            prop_assert!(f >= -1e-12);
            prop_assert!(f >= (-b).max(0.0) - 1e-12);
        }
    }
}
