use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::ComponentCount;
use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// Frozen random ReLU projection `h = max(0, P f)` followed by a ridge
/// decoder over accumulated second-order statistics.
///
/// Fitting only accumulates `G += H^T H` and per-class sums of `h`, so the
/// result does not depend on the order in which data arrives.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjectionHead {
    projection: DMatrix<f64>,
    ridge: f64,
    gram: DMatrix<f64>,
    class_sums: DMatrix<f64>,
    samples_seen: u64,
    decoder: Option<DMatrix<f64>>,
}

impl RandomProjectionHead {
    pub fn new(feature_dim: usize, proj_dim: usize, ridge: f64, seed: u64) -> Result<Self> {
        if !(ridge > 0.0) {
            return Err(Error::InvalidArgument("ridge coefficient must be positive".into()));
        }
        if proj_dim == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument("projection dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(seed, &[0x4a9]);
        let projection = DMatrix::from_fn(proj_dim, feature_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            projection,
            ridge,
            gram: DMatrix::zeros(proj_dim, proj_dim),
            class_sums: DMatrix::zeros(proj_dim, 0),
            samples_seen: 0,
            decoder: None,
        })
    }

    pub fn proj_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn class_sums(&self) -> &DMatrix<f64> {
        &self.class_sums
    }

    pub fn num_classes(&self) -> usize {
        self.class_sums.ncols()
    }

    /// `max(0, P f)` for every feature row.
    pub fn project(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        (features * self.projection.transpose()).map(|v| v.max(0.0))
    }

    pub fn fit(&mut self, features: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
        if features.ncols() != self.feature_dim() || features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "fit got {}x{} features for {} labels, expected width {}",
                features.nrows(),
                features.ncols(),
                labels.len(),
                self.feature_dim()
            )));
        }
        let h = self.project(features);
        self.gram += h.transpose() * &h;
        if let Some(&max) = labels.iter().max() {
            if max >= self.class_sums.ncols() {
                let grown = self.class_sums.clone().resize_horizontally(max + 1, 0.0);
                self.class_sums = grown;
            }
        }
        for (i, &y) in labels.iter().enumerate() {
            let mut col = self.class_sums.column_mut(y);
            col += h.row(i).transpose();
        }
        self.samples_seen += labels.len() as u64;
        self.decoder = None;
        Ok(())
    }

    fn solve(&self) -> Result<DMatrix<f64>> {
        if self.samples_seen == 0 {
            return Err(Error::InvalidArgument("random-projection head used before any fit".into()));
        }
        let m = self.proj_dim();
        let a = &self.gram + DMatrix::identity(m, m) * self.ridge;
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Numerical("ridge system is not positive definite".into()))?;
        Ok(chol.solve(&self.class_sums))
    }

    /// The decoder cached by the last [`finalize`](Self::finalize), if no fit
    /// happened since.
    pub fn decoder(&self) -> Option<&DMatrix<f64>> {
        self.decoder.as_ref()
    }

    /// Caches the ridge decoder `(G + lambda I)^-1 C`.
    pub fn finalize(&mut self) -> Result<()> {
        self.decoder = Some(self.solve()?);
        Ok(())
    }

    /// Class scores `W^T h` for every feature row.
    pub fn scores(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let h = self.project(features);
        match &self.decoder {
            Some(w) => Ok(h * w),
            None => Ok(h * self.solve()?),
        }
    }

    pub fn classify(&self, feature: &DVector<f64>) -> Result<usize> {
        let row = DMatrix::from_row_slice(1, feature.len(), feature.as_slice());
        let s = self.scores(&row)?;
        Ok(argmax_row(&s, 0))
    }

    pub fn census_component(&self) -> ComponentCount {
        ComponentCount {
            name: "random_projection".into(),
            trainable: 0,
            frozen: (self.projection.nrows() * self.projection.ncols()) as u64,
        }
    }

    /// Stored statistics: Gram matrix plus class sums.
    pub fn statistics_len(&self) -> u64 {
        (self.gram.len() + self.class_sums.len()) as u64
    }
}

/// Index of the largest entry of row `i`; ties go to the lowest column.
pub(crate) fn argmax_row(m: &DMatrix<f64>, i: usize) -> usize {
    let mut best = 0;
    for j in 1..m.ncols() {
        if m[(i, j)] > m[(i, best)] {
            best = j;
        }
    }
    best
}
