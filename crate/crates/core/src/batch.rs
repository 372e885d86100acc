use nalgebra::DMatrix;

/// Materialized samples: one input per row plus global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub task_index: usize,
}

impl Batch {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>, task_index: usize) -> Self {
        debug_assert_eq!(inputs.nrows(), labels.len());
        Self { inputs, labels, task_index }
    }

    pub fn empty(dim: usize) -> Self {
        Self { inputs: DMatrix::zeros(0, dim), labels: Vec::new(), task_index: 0 }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            task_index: self.task_index,
        }
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &Batch) -> Batch {
        if self.is_empty() {
            return Batch { task_index: self.task_index, ..other.clone() };
        }
        if other.is_empty() {
            return self.clone();
        }
        let d = self.dim();
        let mut inputs = DMatrix::zeros(self.len() + other.len(), d);
        inputs.rows_mut(0, self.len()).copy_from(&self.inputs);
        inputs.rows_mut(self.len(), other.len()).copy_from(&other.inputs);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Batch { inputs, labels, task_index: self.task_index }
    }
}
