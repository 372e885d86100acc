//! Classifier rebalancing after replay training: nearest-mean-of-exemplars
//! inference, post-hoc bias correction of new-class logits and weight
//! aligning of new-class head rows.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::losses::softmax_cols;
use crate::error::{Error, Result};
use crate::model::ClassifierHead;

fn unit(v: &DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

/// Per-class mean of exemplar features (one exemplar per row).
pub fn class_means(exemplars: &BTreeMap<usize, DMatrix<f64>>) -> Result<BTreeMap<usize, DVector<f64>>> {
    exemplars
        .iter()
        .map(|(&c, f)| {
            if f.nrows() == 0 {
                return Err(Error::InvalidArgument(format!("class {c} has no exemplars")));
            }
            Ok((c, f.row_mean().transpose()))
        })
        .collect()
}

/// Nearest class mean after L2 normalization of both query and means. Ties
/// go to the lowest class id.
pub fn nme_from_means(feature: &DVector<f64>, means: &BTreeMap<usize, DVector<f64>>) -> Result<usize> {
    let f = unit(feature);
    let mut best: Option<(usize, f64)> = None;
    for (&c, mu) in means {
        if mu.len() != f.len() {
            return Err(Error::Shape(format!("class mean of width {} vs feature {}", mu.len(), f.len())));
        }
        let d = (&f - unit(mu)).norm();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((c, d));
        }
    }
    best.map(|(c, _)| c).ok_or_else(|| Error::InvalidArgument("no classes to compare against".into()))
}

/// `argmin_c || f/|f| - mu_c/|mu_c| ||` with `mu_c` the mean exemplar feature.
pub fn icarl_classify_nme(feature: &DVector<f64>, exemplars: &BTreeMap<usize, DMatrix<f64>>) -> Result<usize> {
    nme_from_means(feature, &class_means(exemplars)?)
}

/// Scale and offset applied to new-class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasCorrectionState {
    pub alpha: f64,
    pub beta: f64,
    pub new_classes: Vec<usize>,
}

impl BiasCorrectionState {
    pub fn neutral(new_classes: Vec<usize>) -> Self {
        Self { alpha: 1.0, beta: 0.0, new_classes }
    }
}

/// `alpha * z + beta` on the new-class columns; other columns are copied.
pub fn bic_apply(logits: &DMatrix<f64>, state: &BiasCorrectionState) -> DMatrix<f64> {
    let mut out = logits.clone();
    for &c in &state.new_classes {
        if c < out.ncols() {
            for i in 0..out.nrows() {
                out[(i, c)] = state.alpha * logits[(i, c)] + state.beta;
            }
        }
    }
    out
}

/// Mean cross-entropy over `classes` after correction, with its gradient and
/// Hessian in `(alpha, beta)`.
fn bic_objective(
    logits: &DMatrix<f64>,
    labels: &[usize],
    classes: &[usize],
    is_new: &[bool],
    alpha: f64,
    beta: f64,
) -> (f64, Vector2<f64>, Matrix2<f64>) {
    let n = labels.len() as f64;
    let (mut loss, mut g, mut h) = (0.0, Vector2::zeros(), Matrix2::zeros());
    let cols: Vec<usize> = (0..classes.len()).collect();
    for (i, &y) in labels.iter().enumerate() {
        let z = DMatrix::from_fn(1, classes.len(), |_, k| {
            let v = logits[(i, classes[k])];
            if is_new[k] {
                alpha * v + beta
            } else {
                v
            }
        });
        let p = softmax_cols(&z, 0, &cols, 1.0);
        let yk = classes.iter().position(|&c| c == y).expect("checked");
        loss -= p[yk].max(f64::MIN_POSITIVE).ln();
        let u = |k: usize| {
            if is_new[k] {
                Vector2::new(logits[(i, classes[k])], 1.0)
            } else {
                Vector2::zeros()
            }
        };
        let mut eu = Vector2::zeros();
        let mut euu = Matrix2::zeros();
        for k in 0..classes.len() {
            let uk = u(k);
            eu += uk * p[k];
            euu += uk * uk.transpose() * p[k];
        }
        g += eu - u(yk);
        h += euu - eu * eu.transpose();
    }
    (loss / n, g / n, h / n)
}

/// Fits `(alpha, beta)` by damped Newton steps on the validation
/// cross-entropy over `classes`. The validation labels must include at least
/// one old and one new class.
pub fn bic_fit(
    logits: &DMatrix<f64>,
    labels: &[usize],
    classes: &[usize],
    new_classes: &[usize],
) -> Result<BiasCorrectionState> {
    if labels.len() != logits.nrows() {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), logits.nrows())));
    }
    if let Some(&y) = labels.iter().find(|y| !classes.contains(y)) {
        return Err(Error::InvalidArgument(format!("validation label {y} is not a known class")));
    }
    let has_new = labels.iter().any(|y| new_classes.contains(y));
    let has_old = labels.iter().any(|y| !new_classes.contains(y));
    if !has_new || !has_old {
        return Err(Error::InvalidArgument(
            "bias correction needs validation samples from both old and new classes".into(),
        ));
    }
    let is_new: Vec<bool> = classes.iter().map(|c| new_classes.contains(c)).collect();
    let (mut a, mut b) = (1.0, 0.0);
    let (mut loss, mut g, mut h) = bic_objective(logits, labels, classes, &is_new, a, b);
    for _ in 0..100 {
        if g.norm() < 1e-10 {
            break;
        }
        let hr = h + Matrix2::identity() * 1e-8;
        let step = hr.lu().solve(&g).filter(|s| s.dot(&g) > 0.0).unwrap_or(g);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-10 {
            let (na, nb) = (a - t * step[0], b - t * step[1]);
            let (nl, ng, nh) = bic_objective(logits, labels, classes, &is_new, na, nb);
            if nl <= loss - 1e-4 * t * step.dot(&g) {
                (a, b, loss, g, h) = (na, nb, nl, ng, nh);
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(BiasCorrectionState { alpha: a, beta: b, new_classes: new_classes.to_vec() })
}

fn mean_row_norm(head: &ClassifierHead, rows: &[usize]) -> f64 {
    let d = head.feature_dim();
    rows.iter().map(|&r| head.weight.view((r, 0), (1, d)).norm()).sum::<f64>() / rows.len() as f64
}

/// Scales new-class rows (weights and biases) by
/// `gamma = mean |w_old| / mean |w_new|`. Returns `gamma`.
pub fn wa_align(head: &mut ClassifierHead, old: &[usize], new: &[usize]) -> Result<f64> {
    if old.is_empty() || new.is_empty() {
        return Err(Error::InvalidArgument("weight aligning needs old and new classes".into()));
    }
    if let Some(&c) = old.iter().chain(new).find(|&&c| c >= head.num_classes()) {
        return Err(Error::InvalidArgument(format!("class {c} has no head row")));
    }
    let new_norm = mean_row_norm(head, new);
    if new_norm == 0.0 {
        return Err(Error::Numerical("new-class rows have zero mean norm".into()));
    }
    let gamma = mean_row_norm(head, old) / new_norm;
    for &c in new {
        let mut row = head.weight.row_mut(c);
        row *= gamma;
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn nme_geometry() {
        let mut m = BTreeMap::new();
        m.insert(0, ex(&[&[0.0, 1.0]]));
        m.insert(1, ex(&[&[1.0, 0.0]]));
        assert_eq!(icarl_classify_nme(&DVector::from_vec(vec![0.9, 0.1]), &m).unwrap(), 1);
        assert_eq!(icarl_classify_nme(&DVector::from_vec(vec![0.0, 1.0]), &m).unwrap(), 0);
        m.insert(2, DMatrix::zeros(0, 2));
        assert!(icarl_classify_nme(&DVector::from_vec(vec![0.0, 1.0]), &m).is_err());
    }

    #[test]
    fn nme_ties_to_lowest() {
        let mut m = BTreeMap::new();
        m.insert(3, ex(&[&[1.0, 0.0]]));
        m.insert(5, ex(&[&[1.0, 0.0]]));
        assert_eq!(icarl_classify_nme(&DVector::from_vec(vec![0.0, 1.0]), &m).unwrap(), 3);
    }

    #[test]
    fn bic_examples() {
        let z = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let neutral = BiasCorrectionState::neutral(vec![1]);
        assert_eq!(bic_apply(&z, &neutral), z);
        let s = BiasCorrectionState { alpha: 0.5, beta: 1.0, new_classes: vec![1] };
        assert_eq!(bic_apply(&z, &s)[(0, 1)], 2.0);
        assert_eq!(bic_apply(&z, &s)[(0, 0)], 1.0);
        assert!(bic_fit(&z, &[1], &[0, 1], &[1]).is_err());
    }

    #[test]
    fn bic_fit_is_stationary() {
        let z = DMatrix::from_row_slice(4, 2, &[2.0, 1.0, 0.5, 3.0, 1.0, 1.5, 0.0, 2.5]);
        let labels = [0, 0, 1, 1];
        let s = bic_fit(&z, &labels, &[0, 1], &[1]).unwrap();
        let (_, g, _) = bic_objective(&z, &labels, &[0, 1], &[false, true], s.alpha, s.beta);
        assert!(g.norm() < 1e-6);
    }

    #[test]
    fn wa_examples() {
        let mut head = ClassifierHead { weight: DMatrix::from_row_slice(2, 3, &[2.0, 0.0, 0.1, 0.0, 4.0, 0.4]) };
        let gamma = wa_align(&mut head, &[0], &[1]).unwrap();
        assert_eq!(gamma, 0.5);
        assert_eq!(head.weight.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 2.0, 0.2]);
        assert_eq!(head.weight.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 0.0, 0.1]);
        assert_eq!(wa_align(&mut head, &[0], &[1]).unwrap(), 1.0);
        let mut zero = ClassifierHead { weight: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]) };
        assert!(wa_align(&mut zero, &[0], &[1]).is_err());
    }
}
