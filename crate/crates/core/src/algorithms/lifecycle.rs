//! The learner contract and a guard that enforces hook order.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::batch::Batch;
use crate::buffer::BufferManifest;
use crate::error::{Error, Result};
use crate::memorybudget::StateDescriptor;
use crate::model::{Model, ParameterCensus};

/// What a learner is told when a task begins.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInfo {
    pub task_index: usize,
    /// Classes introduced by this task.
    pub classes: Vec<usize>,
    /// Every class seen so far, this task's included, sorted.
    pub seen_classes: Vec<usize>,
}

/// Per-batch result of `observe`: predictions made before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserveOutput {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub loss: f64,
}

impl ObserveOutput {
    pub fn new(predictions: Vec<usize>, labels: &[usize], loss: f64) -> Self {
        let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        let accuracy = if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 };
        Self { predictions, accuracy, loss }
    }
}

/// A continual learner. Per task the caller invokes `before_task`, then
/// `observe` once per stream batch, then `after_task` with the task's full
/// training data. `inference` never changes state.
pub trait Learner: Send {
    fn method(&self) -> &str;
    fn before_task(&mut self, info: &TaskInfo) -> Result<()>;
    fn observe(&mut self, batch: &Batch) -> Result<ObserveOutput>;
    fn after_task(&mut self, task_data: &Batch) -> Result<()>;
    /// Predicted class per input row, chosen among `classes`.
    fn inference(&self, inputs: &DMatrix<f64>, classes: &[usize]) -> Result<Vec<usize>>;
    fn model(&self) -> &Model;
    fn census(&self) -> ParameterCensus {
        self.model().census()
    }
    fn buffer_manifest(&self) -> Option<BufferManifest> {
        None
    }
    /// Method state that counts against the memory budget.
    fn state_descriptors(&self) -> Vec<StateDescriptor> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Hook {
    BeforeTask,
    Observe,
    AfterTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    InTask(usize),
}

/// Wraps a learner, rejects out-of-order hook calls and records the trace.
pub struct LifecycleGuard {
    inner: Box<dyn Learner>,
    phase: Phase,
    next_task: usize,
    trace: Vec<(usize, Hook)>,
}

impl LifecycleGuard {
    pub fn new(inner: Box<dyn Learner>) -> Self {
        Self { inner, phase: Phase::Idle, next_task: 0, trace: Vec::new() }
    }

    pub fn trace(&self) -> &[(usize, Hook)] {
        &self.trace
    }

    pub fn learner(&self) -> &dyn Learner {
        self.inner.as_ref()
    }

    pub fn before_task(&mut self, info: &TaskInfo) -> Result<()> {
        if self.phase != Phase::Idle {
            return Err(Error::Contract("before_task called while a task is open".into()));
        }
        if info.task_index != self.next_task {
            return Err(Error::Contract(format!(
                "before_task for task {} but task {} is next",
                info.task_index, self.next_task
            )));
        }
        self.inner.before_task(info)?;
        self.phase = Phase::InTask(info.task_index);
        self.trace.push((info.task_index, Hook::BeforeTask));
        Ok(())
    }

    pub fn observe(&mut self, batch: &Batch) -> Result<ObserveOutput> {
        let Phase::InTask(t) = self.phase else {
            return Err(Error::Contract("observe called outside a task".into()));
        };
        let out = self.inner.observe(batch)?;
        self.trace.push((t, Hook::Observe));
        Ok(out)
    }

    pub fn after_task(&mut self, task_data: &Batch) -> Result<()> {
        let Phase::InTask(t) = self.phase else {
            return Err(Error::Contract("after_task called outside a task".into()));
        };
        self.inner.after_task(task_data)?;
        self.phase = Phase::Idle;
        self.next_task = t + 1;
        self.trace.push((t, Hook::AfterTask));
        Ok(())
    }

    pub fn inference(&self, inputs: &DMatrix<f64>, classes: &[usize]) -> Result<Vec<usize>> {
        self.inner.inference(inputs, classes)
    }
}

/// Argmax over `classes` of each row of `scores`; ties go to the earliest
/// entry of `classes`.
pub fn masked_argmax(scores: &DMatrix<f64>, classes: &[usize]) -> Result<Vec<usize>> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("prediction over an empty class set".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= scores.ncols()) {
        return Err(Error::InvalidArgument(format!("class {c} has no score column")));
    }
    Ok((0..scores.nrows())
        .map(|i| {
            let mut best = classes[0];
            for &c in &classes[1..] {
                if scores[(i, c)] > scores[(i, best)] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_argmax_respects_mask() {
        let s = DMatrix::from_row_slice(2, 3, &[5.0, 1.0, 2.0, 0.0, 3.0, 3.0]);
        assert_eq!(masked_argmax(&s, &[1, 2]).unwrap(), vec![2, 1]);
        assert_eq!(masked_argmax(&s, &[0, 1, 2]).unwrap(), vec![0, 1]);
        assert!(masked_argmax(&s, &[]).is_err());
        assert!(masked_argmax(&s, &[3]).is_err());
    }

    #[test]
    fn observe_output_accuracy() {
        let o = ObserveOutput::new(vec![1, 2, 3, 4], &[1, 2, 0, 0], 0.5);
        assert_eq!(o.accuracy, 0.5);
    }
}
