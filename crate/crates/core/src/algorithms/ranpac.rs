//! Frozen-encoder learner: the encoder trains on the first task only, then a
//! random ReLU projection with a ridge decoder absorbs every later task
//! without gradient steps.

use nalgebra::DMatrix;

use super::composed::ComposedLearner;
use super::lifecycle::{masked_argmax, Learner, ObserveOutput, TaskInfo};
use crate::batch::Batch;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::memorybudget::StateDescriptor;
use crate::model::{census, Model, ParameterCensus, RandomProjectionHead};

pub struct RanpacLearner {
    first: ComposedLearner,
    head: RandomProjectionHead,
    /// Decoder from the end of the previous task, used for stream predictions
    /// so the ridge system is solved once per task rather than per batch.
    stale: Option<DMatrix<f64>>,
    task_index: usize,
    seen: Vec<usize>,
}

impl RanpacLearner {
    pub fn from_config(cfg: &ExperimentConfig, input_shape: &[usize]) -> Result<Self> {
        let mut base = cfg.clone();
        base.method = "finetune".into();
        let first = ComposedLearner::from_config(&base, input_shape)?;
        let d = first.model().backbone.feature_dim;
        let head = RandomProjectionHead::new(
            d,
            cfg.param_usize("proj_dim", 1000),
            cfg.param_f64("rp_ridge", 1e-3),
            cfg.seed,
        )?;
        Ok(Self { first, head, stale: None, task_index: 0, seen: Vec::new() })
    }

    fn fitted(&self) -> bool {
        self.first.model().backbone.is_frozen()
    }

    fn scores(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let feats = self.first.model().features(inputs);
        match self.head.decoder() {
            Some(w) => Ok(self.head.project(&feats) * w),
            None => self.head.scores(&feats),
        }
    }

    /// Stale-decoder predictions for classes the head already knows; samples
    /// of unseen classes cannot be predicted correctly anyway.
    fn stream_predictions(&self, inputs: &DMatrix<f64>) -> Result<Vec<usize>> {
        let feats = self.first.model().features(inputs);
        let s = match &self.stale {
            Some(w) => self.head.project(&feats) * w,
            None => self.head.scores(&feats)?,
        };
        let known: Vec<usize> = self.seen.iter().copied().filter(|&c| c < s.ncols()).collect();
        masked_argmax(&s, &known)
    }
}

impl Learner for RanpacLearner {
    fn method(&self) -> &str {
        "ranpac"
    }

    fn before_task(&mut self, info: &TaskInfo) -> Result<()> {
        self.task_index = info.task_index;
        self.seen = info.seen_classes.clone();
        if !self.fitted() {
            self.first.before_task(info)?;
        }
        Ok(())
    }

    fn observe(&mut self, batch: &Batch) -> Result<ObserveOutput> {
        if !self.fitted() {
            return self.first.observe(batch);
        }
        let predictions = self.stream_predictions(&batch.inputs)?;
        let feats = self.first.model().features(&batch.inputs);
        self.head.fit(&feats, &batch.labels)?;
        Ok(ObserveOutput::new(predictions, &batch.labels, 0.0))
    }

    fn after_task(&mut self, task_data: &Batch) -> Result<()> {
        if !self.fitted() {
            self.first.after_task(task_data)?;
            let feats = self.first.model().features(&task_data.inputs);
            self.head.fit(&feats, &task_data.labels)?;
            let mut model = self.first.model().clone();
            model.backbone.freeze();
            self.first = ComposedLearner::plain("ranpac", model, &ExperimentConfig::default());
        }
        self.head.finalize()?;
        self.stale = self.head.decoder().cloned();
        Ok(())
    }

    fn inference(&self, inputs: &DMatrix<f64>, classes: &[usize]) -> Result<Vec<usize>> {
        if !self.fitted() {
            return Err(Error::Contract("random-projection head queried before the first task ended".into()));
        }
        masked_argmax(&self.scores(inputs)?, classes)
    }

    fn model(&self) -> &Model {
        self.first.model()
    }

    fn census(&self) -> ParameterCensus {
        let mut comps = self.first.model().backbone.census_components();
        comps.push(self.head.census_component());
        census(&comps)
    }

    fn state_descriptors(&self) -> Vec<StateDescriptor> {
        vec![StateDescriptor::new("feature", self.head.statistics_len())]
    }
}
