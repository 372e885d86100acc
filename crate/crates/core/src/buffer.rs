//! Bounded exemplar memory with reservoir, class-balanced random and herding
//! selection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::config::BufferStrategy;
use crate::error::{Error, Result};
use crate::util::{seeded_rng, Rng};

/// Maps a batch of inputs (one per row) to feature rows.
pub type FeatureFn<'a> = &'a dyn Fn(&DMatrix<f64>) -> DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub input: Vec<f64>,
    pub label: usize,
    pub task_index: usize,
}

/// Snapshot consumed by the memory-budget ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferManifest {
    pub strategy: BufferStrategy,
    pub capacity: usize,
    pub per_class_counts: BTreeMap<usize, usize>,
    /// Shape of one stored input; its product is the channel-value count.
    pub input_shape: Vec<usize>,
}

impl BufferManifest {
    pub fn stored(&self) -> usize {
        self.per_class_counts.values().sum()
    }

    pub fn values_per_exemplar(&self) -> u64 {
        self.input_shape.iter().product::<usize>() as u64
    }
}

#[derive(Debug, Clone)]
pub struct ExemplarBuffer {
    capacity: usize,
    strategy: BufferStrategy,
    input_shape: Vec<usize>,
    entries: Vec<Exemplar>,
    seen_count: u64,
    rng: Rng,
}

impl ExemplarBuffer {
    pub fn new(capacity: usize, strategy: BufferStrategy, input_shape: Vec<usize>, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Buffer(
                "replay needs a positive buffer capacity (buffer.capacity or buffer.budget_bytes)".into(),
            ));
        }
        Ok(Self {
            capacity,
            strategy,
            input_shape,
            entries: Vec::new(),
            seen_count: 0,
            rng: seeded_rng(seed, &[0xb0ff]),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn strategy(&self) -> BufferStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Exemplar] {
        &self.entries
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.label).or_insert(0) += 1;
        }
        m
    }

    pub fn manifest(&self) -> BufferManifest {
        BufferManifest {
            strategy: self.strategy,
            capacity: self.capacity,
            per_class_counts: self.per_class_counts(),
            input_shape: self.input_shape.clone(),
        }
    }

    /// Reservoir insertion of a stream batch: after `n` offers every offered
    /// sample is held with probability `capacity / n`.
    pub fn observe_stream(&mut self, batch: &Batch) {
        for (i, &label) in batch.labels.iter().enumerate() {
            self.seen_count += 1;
            let ex = Exemplar {
                input: batch.inputs.row(i).iter().copied().collect(),
                label,
                task_index: batch.task_index,
            };
            if self.entries.len() < self.capacity {
                self.entries.push(ex);
            } else {
                let j = self.rng.random_range(0..self.seen_count);
                if (j as usize) < self.capacity {
                    self.entries[j as usize] = ex;
                }
            }
        }
    }

    /// End-of-task update. Reservoir buffers ignore this (they are filled per
    /// batch); balanced strategies shrink every stored class to the new quota
    /// `capacity / classes_seen`, keeping each class's selection-order prefix,
    /// then add the task's classes. `feature_fn` maps inputs to features and is
    /// required for herding.
    pub fn update_after_task(
        &mut self,
        task_data: &Batch,
        feature_fn: Option<FeatureFn<'_>>,
    ) -> Result<()> {
        if self.strategy == BufferStrategy::Reservoir {
            return Ok(());
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in task_data.labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let old = self.per_class_counts();
        let classes_seen = old.keys().chain(by_class.keys()).collect::<std::collections::BTreeSet<_>>().len();
        if classes_seen == 0 {
            return Ok(());
        }
        let quota = self.capacity / classes_seen;

        let mut kept: BTreeMap<usize, usize> = BTreeMap::new();
        self.entries.retain(|e| {
            let k = kept.entry(e.label).or_insert(0);
            *k += 1;
            *k <= quota
        });

        for (&class, rows) in &by_class {
            let m = quota.min(rows.len());
            if m == 0 {
                continue;
            }
            let order: Vec<usize> = match self.strategy {
                BufferStrategy::Herding => {
                    let f = feature_fn.ok_or_else(|| {
                        Error::Buffer("herding selection needs a feature function".into())
                    })?;
                    let feats = f(&task_data.inputs.select_rows(rows));
                    herding_select(&feats, m)?.into_iter().map(|i| rows[i]).collect()
                }
                _ => {
                    let mut r = rows.clone();
                    r.shuffle(&mut self.rng);
                    r.truncate(m);
                    r
                }
            };
            for i in order {
                self.entries.push(Exemplar {
                    input: task_data.inputs.row(i).iter().copied().collect(),
                    label: class,
                    task_index: task_data.task_index,
                });
            }
        }
        Ok(())
    }

    /// `k` entries, uniform without replacement (with replacement when `k`
    /// exceeds the stored count). An empty buffer yields an empty batch.
    pub fn sample_with(&self, k: usize, rng: &mut Rng) -> Batch {
        let dim = self.input_shape.iter().product();
        if self.entries.is_empty() || k == 0 {
            return Batch::empty(dim);
        }
        let n = self.entries.len();
        let idx: Vec<usize> = if k <= n {
            index::sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        };
        self.to_batch(&idx)
    }

    pub fn sample_batch(&self, k: usize, seed: u64) -> Batch {
        self.sample_with(k, &mut seeded_rng(seed, &[0x5a3b]))
    }

    /// Every stored exemplar as one batch, in storage order.
    pub fn all(&self) -> Batch {
        let idx: Vec<usize> = (0..self.entries.len()).collect();
        self.to_batch(&idx)
    }

    fn to_batch(&self, idx: &[usize]) -> Batch {
        let dim: usize = self.input_shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(&self.entries[i].input);
        }
        Batch {
            inputs: DMatrix::from_row_slice(idx.len(), dim, &data),
            labels: idx.iter().map(|&i| self.entries[i].label).collect(),
            task_index: idx.first().map(|&i| self.entries[i].task_index).unwrap_or(0),
        }
    }
}

/// Greedy mean matching. At step `j` the remaining sample minimizing
/// `|mu - (sum_chosen + f_i) / j|` is chosen; ties (up to round-off) go to
/// the lowest index.
/// `features` holds one sample per row.
pub fn herding_select(features: &DMatrix<f64>, m: usize) -> Result<Vec<usize>> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Buffer("herding over an empty feature set".into()));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!("herding asked for {m} of {n} samples")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite features in herding".into()));
    }
    let mu: DVector<f64> = features.row_mean().transpose();
    let mut running = DVector::zeros(features.ncols());
    let mut taken = vec![false; n];
    let mut picks = Vec::with_capacity(m);
    for step in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let cand = (&running + features.row(i).transpose()) / step as f64;
            let d = (&mu - cand).norm();
            if best.is_none_or(|(_, bd)| d < bd * (1.0 - 1e-9)) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("remaining candidates");
        taken[i] = true;
        running += features.row(i).transpose();
        picks.push(i);
    }
    Ok(picks)
}
