use rand::seq::SliceRandom;

use super::{LabeledRef, SampleRef, StreamMode, TaskSpec};
use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// One mini-batch of sample locators from a task's training stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamBatch {
    pub refs: Vec<SampleRef>,
    pub labels: Vec<usize>,
    pub task_index: usize,
    /// Index within the task, counting across epochs.
    pub batch_index: usize,
    pub epoch: usize,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

/// Batches for one task. Online mode is one shuffled pass where every sample
/// appears exactly once; offline mode repeats that for each epoch with a fresh
/// shuffle. The final batch of a pass may be short.
pub fn iterate_stream(task: &TaskSpec, mode: StreamMode, batch_size: usize, seed: u64) -> Result<Vec<StreamBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if task.train_refs.is_empty() {
        return Err(Error::Dataset(format!("task {} has no training samples", task.task_index)));
    }
    let mut out = Vec::with_capacity(mode.passes() * task.train_refs.len().div_ceil(batch_size));
    let mut order: Vec<LabeledRef> = task.train_refs.clone();
    for epoch in 0..mode.passes() {
        order.shuffle(&mut seeded_rng(seed, &[0x57e4, task.task_index as u64, epoch as u64]));
        for chunk in order.chunks(batch_size) {
            out.push(StreamBatch {
                refs: chunk.iter().map(|r| r.sample).collect(),
                labels: chunk.iter().map(|r| r.label).collect(),
                task_index: task.task_index,
                batch_index: out.len(),
                epoch,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::datastream::Split;

    fn task(n: usize) -> TaskSpec {
        TaskSpec {
            task_index: 0,
            class_ids: vec![0, 1],
            train_refs: (0..n)
                .map(|i| LabeledRef {
                    sample: SampleRef { source: 0, split: Split::Train, index: i as u32 },
                    label: i % 2,
                })
                .collect(),
            test_refs: vec![],
        }
    }

    fn counts(batches: &[StreamBatch]) -> HashMap<SampleRef, usize> {
        let mut m = HashMap::new();
        for b in batches {
            for r in &b.refs {
                *m.entry(*r).or_default() += 1;
            }
        }
        m
    }

    #[test]
    fn online_single_pass() {
        let b = iterate_stream(&task(100), StreamMode::Online, 10, 1).unwrap();
        assert_eq!(b.len(), 10);
        let c = counts(&b);
        assert_eq!(c.len(), 100);
        assert!(c.values().all(|&v| v == 1));
    }

    #[test]
    fn short_last_batch() {
        let b = iterate_stream(&task(105), StreamMode::Online, 10, 1).unwrap();
        assert_eq!(b.len(), 11);
        assert_eq!(b.last().unwrap().len(), 5);
    }

    #[test]
    fn offline_epochs_reshuffle() {
        let b = iterate_stream(&task(100), StreamMode::Offline { epochs: 3 }, 10, 1).unwrap();
        assert_eq!(b.len(), 30);
        assert!(counts(&b).values().all(|&v| v == 3));
        assert_ne!(b[0].refs, b[10].refs);
        assert_eq!(b[29].batch_index, 29);
    }

    #[test]
    fn errors() {
        assert!(iterate_stream(&task(10), StreamMode::Online, 0, 1).is_err());
        assert!(iterate_stream(&task(0), StreamMode::Online, 4, 1).is_err());
    }
}
