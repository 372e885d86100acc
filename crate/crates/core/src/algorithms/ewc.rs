//! Quadratic consolidation penalty weighted by a diagonal Fisher estimate.

use nalgebra::DMatrix;
use rand::distr::{weighted::WeightedIndex, Distribution};

use super::losses::softmax_cols;
use crate::error::{Error, Result};
use crate::model::{Grads, Model};
use crate::util::Rng;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EwcState {
    /// Per-parameter importance, non-negative. Empty before the first task ends.
    pub fisher: Vec<f64>,
    /// Parameters at the end of the previous task.
    pub anchor: Vec<f64>,
    pub lambda: f64,
}

impl EwcState {
    pub fn new(lambda: f64) -> Self {
        Self { fisher: Vec::new(), anchor: Vec::new(), lambda }
    }

    pub fn is_consolidated(&self) -> bool {
        !self.anchor.is_empty()
    }

    /// Adds a new importance estimate and moves the anchor.
    pub fn consolidate(&mut self, fisher: Vec<f64>, anchor: Vec<f64>) {
        if self.fisher.len() < fisher.len() {
            self.fisher.resize(fisher.len(), 0.0);
        }
        for (f, n) in self.fisher.iter_mut().zip(fisher) {
            *f += n;
        }
        self.anchor = anchor;
    }

    fn check(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.anchor.len() || self.fisher.len() != self.anchor.len() {
            return Err(Error::Shape(format!(
                "EWC: {} parameters, anchor {}, fisher {}",
                params.len(),
                self.anchor.len(),
                self.fisher.len()
            )));
        }
        Ok(())
    }
}

/// `lambda * sum_i F_i (theta_i - anchor_i)^2`; zero before consolidation.
pub fn ewc_penalty(params: &[f64], state: &EwcState) -> Result<f64> {
    if !state.is_consolidated() {
        return Ok(0.0);
    }
    state.check(params)?;
    let s: f64 = params
        .iter()
        .zip(&state.anchor)
        .zip(&state.fisher)
        .map(|((p, a), f)| f * (p - a) * (p - a))
        .sum();
    Ok(state.lambda * s)
}

/// `2 lambda F (theta - anchor)`.
pub fn ewc_penalty_grad(params: &[f64], state: &EwcState) -> Result<Vec<f64>> {
    if !state.is_consolidated() {
        return Ok(vec![0.0; params.len()]);
    }
    state.check(params)?;
    Ok(params
        .iter()
        .zip(&state.anchor)
        .zip(&state.fisher)
        .map(|((p, a), f)| 2.0 * state.lambda * f * (p - a))
        .collect())
}

/// How labels are chosen when forming squared scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMode {
    /// Labels drawn from the model's predictive distribution.
    Sampled,
    /// Exact expectation over the predictive distribution.
    Expected,
    /// Observed labels (empirical Fisher).
    Empirical,
}

impl FisherMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Self::Sampled),
            "expected" => Ok(Self::Expected),
            "empirical" => Ok(Self::Empirical),
            _ => Err(Error::InvalidArgument(format!("unknown fisher mode `{s}`"))),
        }
    }
}

/// Diagonal Fisher `F_i = 1/n sum (d log p(y|x) / d theta_i)^2` over the first
/// `n_samples` rows of `inputs`, with the softmax restricted to `classes`.
pub fn estimate_fisher_diag(
    model: &Model,
    inputs: &DMatrix<f64>,
    labels: Option<&[usize]>,
    classes: &[usize],
    n_samples: usize,
    mode: FisherMode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = inputs.nrows().min(n_samples);
    if n == 0 || classes.is_empty() {
        return Err(Error::InvalidArgument("Fisher estimation needs data and classes".into()));
    }
    if mode == FisherMode::Empirical && labels.is_none() {
        return Err(Error::InvalidArgument("empirical Fisher needs labels".into()));
    }
    if let Some(f) = fisher_batched(model, &inputs.rows(0, n).into_owned(), labels, classes, mode, rng)? {
        return Ok(f);
    }
    let mut fisher = vec![0.0; model.num_params()];
    let mut accumulate = |trace: &crate::model::ForwardTrace, p: &[f64], y_pos: usize, weight: f64| {
        let mut g = DMatrix::zeros(1, model.num_classes());
        for (k, &c) in classes.iter().enumerate() {
            g[(0, c)] = p[k] - if k == y_pos { 1.0 } else { 0.0 };
        }
        let flat = model.backward(trace, &g).to_flat();
        for (f, v) in fisher.iter_mut().zip(flat) {
            *f += weight * v * v;
        }
    };
    for i in 0..n {
        let x = inputs.rows(i, 1).into_owned();
        let trace = model.forward(&x);
        let p = softmax_cols(&trace.logits, 0, classes, 1.0);
        match mode {
            FisherMode::Expected => {
                for k in 0..classes.len() {
                    accumulate(&trace, &p, k, p[k]);
                }
            }
            FisherMode::Sampled => {
                let k = WeightedIndex::new(&p)
                    .map_err(|e| Error::Numerical(format!("predictive distribution: {e}")))?
                    .sample(rng);
                accumulate(&trace, &p, k, 1.0);
            }
            FisherMode::Empirical => {
                let y = labels.expect("checked")[i];
                let k = classes
                    .iter()
                    .position(|&c| c == y)
                    .ok_or_else(|| Error::InvalidArgument(format!("label {y} not among classes")))?;
                accumulate(&trace, &p, k, 1.0);
            }
        }
    }
    for f in &mut fisher {
        *f /= n as f64;
    }
    Ok(fisher)
}

/// Index into `classes` of each row's score label.
fn score_labels(
    p: &[Vec<f64>],
    labels: Option<&[usize]>,
    classes: &[usize],
    mode: FisherMode,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    p.iter()
        .enumerate()
        .map(|(i, pi)| match mode {
            FisherMode::Empirical => {
                let y = labels.expect("checked")[i];
                classes
                    .iter()
                    .position(|&c| c == y)
                    .ok_or_else(|| Error::InvalidArgument(format!("label {y} not among classes")))
            }
            _ => Ok(WeightedIndex::new(pi)
                .map_err(|e| Error::Numerical(format!("predictive distribution: {e}")))?
                .sample(rng)),
        })
        .collect()
}

/// Whole-batch estimate through [`Model::squared_grad_sum`]; `None` when the
/// model has layers whose per-sample gradients do not factor.
fn fisher_batched(
    model: &Model,
    x: &DMatrix<f64>,
    labels: Option<&[usize]>,
    classes: &[usize],
    mode: FisherMode,
    rng: &mut Rng,
) -> Result<Option<Vec<f64>>> {
    let n = x.nrows();
    let trace = model.forward(x);
    let p: Vec<Vec<f64>> = (0..n).map(|i| softmax_cols(&trace.logits, i, classes, 1.0)).collect();
    let c = model.num_classes();
    let score = |targets: &[usize], weights: Option<usize>| {
        DMatrix::from_fn(n, c, |i, col| match classes.iter().position(|&k| k == col) {
            Some(k) => {
                let w = weights.map_or(1.0, |t| p[i][t].sqrt());
                w * (p[i][k] - if k == targets[i] { 1.0 } else { 0.0 })
            }
            None => 0.0,
        })
    };
    let total = match mode {
        FisherMode::Expected => {
            let mut acc: Option<Grads> = None;
            for t in 0..classes.len() {
                let targets = vec![t; n];
                let Some(g) = model.squared_grad_sum(&trace, &score(&targets, Some(t))) else {
                    return Ok(None);
                };
                match &mut acc {
                    Some(a) => a.add_scaled(&g, 1.0),
                    None => acc = Some(g),
                }
            }
            acc.expect("at least one class")
        }
        _ => {
            let targets = score_labels(&p, labels, classes, mode, rng)?;
            match model.squared_grad_sum(&trace, &score(&targets, None)) {
                Some(g) => g,
                None => return Ok(None),
            }
        }
    };
    Ok(Some(total.to_flat().into_iter().map(|v| v / n as f64).collect()))
}
