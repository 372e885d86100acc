//! Loss functions returning both the value and the gradient with respect to
//! the logits they were given.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Row-wise softmax of `z / temperature` restricted to `cols`; other columns
/// get probability zero.
pub fn softmax_cols(z: &DMatrix<f64>, row: usize, cols: &[usize], temperature: f64) -> Vec<f64> {
    let m = cols.iter().map(|&c| z[(row, c)] / temperature).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = cols.iter().map(|&c| (z[(row, c)] / temperature - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy where sample `i` competes only among `masks[i]`.
/// Returns the loss and `d loss / d logits`.
pub fn cross_entropy_per_sample(
    logits: &DMatrix<f64>,
    labels: &[usize],
    masks: &[&[usize]],
) -> Result<(f64, DMatrix<f64>)> {
    let n = labels.len();
    let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (i, (&y, cols)) in labels.iter().zip(masks).enumerate() {
        if cols.is_empty() {
            return Err(Error::InvalidArgument("cross-entropy over an empty class mask".into()));
        }
        let pos = cols
            .iter()
            .position(|&c| c == y)
            .ok_or_else(|| Error::InvalidArgument(format!("label {y} is outside the class mask")))?;
        let p = softmax_cols(logits, i, cols, 1.0);
        loss -= p[pos].max(f64::MIN_POSITIVE).ln();
        for (k, &c) in cols.iter().enumerate() {
            grad[(i, c)] = (p[k] - if k == pos { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean cross-entropy with one class mask shared by every sample.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize], classes: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let masks = vec![classes; labels.len()];
    cross_entropy_per_sample(logits, labels, &masks)
}

/// `tau^2 * KL(softmax(old / tau) || softmax(new / tau))`, averaged over rows.
/// The gradient is with respect to `new_logits`.
pub fn distill_loss(new_logits: &DMatrix<f64>, old_logits: &DMatrix<f64>, tau: f64) -> Result<(f64, DMatrix<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("distillation temperature must be positive, got {tau}")));
    }
    if new_logits.shape() != old_logits.shape() {
        return Err(Error::Shape(format!(
            "distillation logits {:?} vs {:?}",
            new_logits.shape(),
            old_logits.shape()
        )));
    }
    let (n, c) = new_logits.shape();
    let mut grad = DMatrix::zeros(n, c);
    if n == 0 || c == 0 {
        return Ok((0.0, grad));
    }
    let cols: Vec<usize> = (0..c).collect();
    let mut loss = 0.0;
    for i in 0..n {
        let p = softmax_cols(old_logits, i, &cols, tau);
        let q = softmax_cols(new_logits, i, &cols, tau);
        for k in 0..c {
            if p[k] > 0.0 {
                loss += p[k] * (p[k].ln() - q[k].max(f64::MIN_POSITIVE).ln());
            }
            grad[(i, k)] = tau * (q[k] - p[k]) / n as f64;
        }
    }
    Ok((tau * tau * loss / n as f64, grad))
}

/// `loss_new + beta * loss_mem`; pass `0.0` for an empty memory batch.
pub fn replay_loss(loss_new: f64, loss_mem: f64, beta: f64) -> f64 {
    debug_assert!(beta >= 0.0);
    loss_new + beta * loss_mem
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Stream,
    Buffer,
}

/// Asymmetric cross-entropy: stream samples compete only among the current
/// task's classes plus the stream labels present in the batch; buffer samples
/// compete among all `seen` classes.
pub fn erace_masked_loss(
    logits: &DMatrix<f64>,
    labels: &[usize],
    current: &[usize],
    seen: &[usize],
    origins: &[Origin],
) -> Result<(f64, DMatrix<f64>)> {
    let mut stream_mask: Vec<usize> = current.to_vec();
    for (&y, o) in labels.iter().zip(origins) {
        if *o == Origin::Stream && !stream_mask.contains(&y) {
            stream_mask.push(y);
        }
    }
    stream_mask.sort_unstable();
    if seen.is_empty() || stream_mask.is_empty() {
        return Err(Error::InvalidArgument("ER-ACE needs non-empty class masks".into()));
    }
    let masks: Vec<&[usize]> = origins
        .iter()
        .map(|o| match o {
            Origin::Stream => stream_mask.as_slice(),
            Origin::Buffer => seen,
        })
        .collect();
    cross_entropy_per_sample(logits, labels, &masks)
}
