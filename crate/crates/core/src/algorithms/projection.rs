//! Gradient-projection machinery: orthogonal projection against stored
//! subspaces, null-space projection from feature covariances, the closed-form
//! regularized projector and trust-region scaled projection.
//!
//! A parameter group is an augmented weight `out x width`; each of its rows is
//! projected as a vector in `R^width`, the space spanned by the group's input
//! representations.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// `g - M M^T g` applied to every row of `grad`.
pub fn gpm_project_gradient(grad: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if basis.ncols() == 0 {
        return Ok(grad.clone());
    }
    if basis.nrows() != grad.ncols() {
        return Err(Error::Shape(format!(
            "basis has {} rows but gradient rows have width {}",
            basis.nrows(),
            grad.ncols()
        )));
    }
    Ok(grad - (grad * basis) * basis.transpose())
}

/// Eigen-decomposition of a symmetric PSD matrix with eigenvalues sorted in
/// descending order.
fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_columns(&idx.iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>());
    (vals, vecs)
}

/// Left singular vectors and squared singular values of `r`, by descending
/// singular value.
fn left_singular(r: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let svd = r.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let energies = idx.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let cols = DMatrix::from_columns(&idx.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    (energies, cols)
}

/// Modified Gram-Schmidt; columns with residual norm below `tol` are dropped.
pub fn orthonormalize(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let mut cols: Vec<nalgebra::DVector<f64>> = Vec::new();
    for j in 0..m.ncols() {
        let mut v = m.column(j).into_owned();
        for _ in 0..2 {
            for c in &cols {
                let d = c.dot(&v);
                v -= c * d;
            }
        }
        let n = v.norm();
        if n > tol {
            cols.push(v / n);
        }
    }
    if cols.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Per-group orthonormal bases of past-task representation subspaces.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceState {
    pub bases: Vec<DMatrix<f64>>,
    pub threshold: f64,
    /// Optional cap on basis columns per group.
    pub max_cols: Option<usize>,
}

impl SubspaceState {
    pub fn new(widths: &[usize], threshold: f64) -> Self {
        Self { bases: widths.iter().map(|&w| DMatrix::zeros(w, 0)).collect(), threshold, max_cols: None }
    }

    pub fn total_elements(&self) -> u64 {
        self.bases.iter().map(|b| b.len() as u64).sum()
    }
}

/// Extends `basis` with the fewest new left-singular directions of the
/// residual activations so that the captured fraction of the activation
/// energy reaches `threshold`. `activations` holds one representation per
/// column. Returns the extended basis and the number of columns added.
pub fn gpm_update_subspace(
    basis: &DMatrix<f64>,
    activations: &DMatrix<f64>,
    threshold: f64,
    max_cols: Option<usize>,
) -> Result<(DMatrix<f64>, usize)> {
    let width = activations.nrows();
    if basis.nrows() != width {
        return Err(Error::Shape(format!("basis rows {} vs activation width {width}", basis.nrows())));
    }
    if activations.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite activations".into()));
    }
    let total: f64 = activations.norm_squared();
    if total == 0.0 || activations.ncols() == 0 {
        return Ok((basis.clone(), 0));
    }
    let (residual, captured) = if basis.ncols() == 0 {
        (activations.clone(), 0.0)
    } else {
        let proj = basis * (basis.transpose() * activations);
        ((activations - &proj), proj.norm_squared())
    };
    let limit = max_cols.unwrap_or(width).min(width);
    let room = limit.saturating_sub(basis.ncols());
    if captured / total >= threshold || residual.norm_squared() <= 1e-12 * total || room == 0 {
        return Ok((basis.clone(), 0));
    }
    let (energies, u) = left_singular(&residual);
    let mut acc = captured;
    let mut k = 0;
    while k < energies.len() && k < room && acc / total < threshold {
        if energies[k] <= 1e-12 * total {
            break;
        }
        acc += energies[k];
        k += 1;
    }
    let mut combined = basis.clone().resize_horizontally(basis.ncols() + k, 0.0);
    combined.columns_mut(basis.ncols(), k).copy_from(&u.columns(0, k));
    let ortho = orthonormalize(&combined, 1e-10);
    let added = ortho.ncols() - basis.ncols().min(ortho.ncols());
    Ok((ortho, added))
}

/// Running second moment of one group's representations, kept as a factor
/// `F` with `F^T F = sum_n x_n x_n^T`. Rows of `F` are mutually orthogonal
/// after every update, so they are the eigen-directions of the covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceCache {
    pub factor: DMatrix<f64>,
    pub count: u64,
    /// Directions kept after each update, largest first.
    pub max_rank: usize,
}

impl CovarianceCache {
    pub fn new(width: usize) -> Self {
        Self::with_rank(width, width)
    }

    pub fn with_rank(width: usize, max_rank: usize) -> Self {
        Self { factor: DMatrix::zeros(0, width), count: 0, max_rank: max_rank.max(1) }
    }

    pub fn width(&self) -> usize {
        self.factor.ncols()
    }

    /// Adds representations given one per row.
    pub fn accumulate(&mut self, reps: &DMatrix<f64>) {
        let w = self.width();
        let r = self.factor.nrows();
        let mut stacked = DMatrix::zeros(r + reps.nrows(), w);
        stacked.rows_mut(0, r).copy_from(&self.factor);
        stacked.rows_mut(r, reps.nrows()).copy_from(reps);
        self.count += reps.nrows() as u64;
        // Eigen-decompose the small Gram matrix F F^T; U^T F has orthogonal rows.
        let (vals, vecs) = sorted_eigen(&(&stacked * stacked.transpose()));
        let top = vals.first().copied().unwrap_or(0.0);
        let keep = vals
            .iter()
            .take(self.max_rank.min(w))
            .take_while(|&&v| v > top * 1e-13 && v > 0.0)
            .count();
        self.factor = vecs.columns(0, keep).transpose() * stacked;
    }

    /// `(1/n) F^T F`, or `None` before any data.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.count > 0).then(|| self.factor.transpose() * &self.factor / self.count as f64)
    }

    /// Non-zero covariance eigenvalues (descending) and their unit
    /// eigenvectors as columns. Every direction not listed has eigenvalue 0.
    pub fn spectrum(&self) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.count.max(1) as f64;
        let mut vals = Vec::with_capacity(self.factor.nrows());
        let mut cols = Vec::with_capacity(self.factor.nrows());
        for i in 0..self.factor.nrows() {
            let row = self.factor.row(i);
            let norm = row.norm();
            vals.push(norm * norm / n);
            cols.push(row.transpose() / norm);
        }
        let vecs = if cols.is_empty() { DMatrix::zeros(self.width(), 0) } else { DMatrix::from_columns(&cols) };
        (vals, vecs)
    }
}

/// `D -> D - (D V) diag(shrink) V^T` for orthonormal columns `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankProjector {
    pub basis: DMatrix<f64>,
    pub shrink: Vec<f64>,
}

impl LowRankProjector {
    pub fn identity(width: usize) -> Self {
        Self { basis: DMatrix::zeros(width, 0), shrink: Vec::new() }
    }

    /// Applies the projector to every row of `d`.
    pub fn apply(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        if self.shrink.is_empty() {
            return d.clone();
        }
        let mut dv = d * &self.basis;
        for (j, s) in self.shrink.iter().enumerate() {
            let mut c = dv.column_mut(j);
            c *= *s;
        }
        d - dv * self.basis.transpose()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let w = self.basis.nrows();
        self.apply(&DMatrix::identity(w, w))
    }

    /// Null-space projector: removes the eigen-directions whose eigenvalue
    /// exceeds `a * lambda_min` (plus round-off). Identity before any data.
    pub fn nscl(cache: &CovarianceCache, a: f64) -> Result<Self> {
        if a < 1.0 {
            return Err(Error::InvalidArgument(format!("null-space multiplier must be >= 1, got {a}")));
        }
        let w = cache.width();
        if cache.count == 0 {
            return Ok(Self::identity(w));
        }
        let (vals, vecs) = cache.spectrum();
        let max = vals.first().copied().unwrap_or(0.0);
        let tol = max * w as f64 * f64::EPSILON * 16.0;
        let min = if vals.len() < w { 0.0 } else { vals.iter().copied().fold(f64::INFINITY, f64::min) };
        let cut = a * min + tol;
        let out: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > cut).collect();
        if out.is_empty() {
            return Ok(Self::identity(w));
        }
        Ok(Self {
            basis: DMatrix::from_columns(&out.iter().map(|&i| vecs.column(i)).collect::<Vec<_>>()),
            shrink: vec![1.0; out.len()],
        })
    }

    /// `(I + lambda C)^-1` through the eigen-directions of the covariance
    /// `C`: each is scaled by `1 / (1 + lambda mu)`.
    pub fn adabop(cache: &CovarianceCache, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be non-negative".into()));
        }
        let (vals, vecs) = cache.spectrum();
        Ok(Self { basis: vecs, shrink: vals.iter().map(|m| lambda * m / (1.0 + lambda * m)).collect() })
    }
}

/// `U_2 U_2^T` where `U_2` spans the eigenvectors of `covariance` whose
/// eigenvalues are at most `a * lambda_min`. Eigenvalues within round-off of
/// zero count as zero. `None` covariance gives the identity.
pub fn nscl_projector(covariance: Option<&DMatrix<f64>>, a: f64, width: usize) -> Result<DMatrix<f64>> {
    let Some(cov) = covariance else {
        return Ok(DMatrix::identity(width, width));
    };
    if cov.nrows() != width || cov.ncols() != width {
        return Err(Error::Shape(format!("covariance {:?} for width {width}", cov.shape())));
    }
    if a < 1.0 {
        return Err(Error::InvalidArgument(format!("null-space multiplier must be >= 1, got {a}")));
    }
    let (vals, vecs) = sorted_eigen(cov);
    let max = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = max * width as f64 * f64::EPSILON * 16.0;
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
    let cut = a * min + tol;
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] <= cut).collect();
    let u2 = DMatrix::from_columns(&keep.iter().map(|&i| vecs.column(i)).collect::<Vec<_>>());
    Ok(&u2 * u2.transpose())
}

/// Projects every row of `grad` with `U_2 U_2^T` (see [`nscl_projector`]).
pub fn nscl_project_gradient(grad: &DMatrix<f64>, covariance: Option<&DMatrix<f64>>, a: f64) -> Result<DMatrix<f64>> {
    let p = nscl_projector(covariance, a, grad.ncols())?;
    Ok(grad * p)
}

/// `(I + lambda X X^T)^-1` for representations stored one per column of
/// `features`.
pub fn adabop_projection(features: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite features".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be non-negative".into()));
    }
    let outer = features * features.transpose();
    adabop_from_outer(&outer, lambda)
}

/// As [`adabop_projection`], from an accumulated `X X^T`.
pub fn adabop_from_outer(outer: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let w = outer.nrows();
    let a = DMatrix::identity(w, w) + outer * lambda;
    let inv = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("I + lambda X X^T is not positive definite".into()))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Past tasks whose subspace holds at least a fraction `epsilon` of the
/// gradient norm: `|| g S S^T || / || g || >= epsilon` (Frobenius over rows).
pub fn trgp_trust_region(grad: &DMatrix<f64>, bases: &[DMatrix<f64>], epsilon: f64) -> Vec<usize> {
    let gn = grad.norm();
    if gn == 0.0 {
        return Vec::new();
    }
    bases
        .iter()
        .enumerate()
        .filter(|(_, s)| s.ncols() > 0 && s.nrows() == grad.ncols())
        .filter(|(_, s)| (grad * *s * s.transpose()).norm() / gn >= epsilon)
        .map(|(j, _)| j)
        .collect()
}

/// `W + sum_{j in selected} (W S_j Q_j S_j^T - W S_j S_j^T)`.
pub fn trgp_effective_weight(
    weight: &DMatrix<f64>,
    selected: &[usize],
    bases: &[DMatrix<f64>],
    scales: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    let mut out = weight.clone();
    for &j in selected {
        let (s, q) = (&bases[j], &scales[j]);
        if q.nrows() != s.ncols() || q.ncols() != s.ncols() {
            return Err(Error::Shape(format!(
                "scale matrix {:?} for a basis with {} columns",
                q.shape(),
                s.ncols()
            )));
        }
        let ws = weight * s;
        out += (&ws * q) * s.transpose() - &ws * s.transpose();
    }
    Ok(out)
}

/// `M A` (or `M A^T` when `transpose`) without forming `A`, at a cost linear
/// in the layer width.
pub fn trgp_mix_rows(
    m: &DMatrix<f64>,
    selected: &[usize],
    bases: &[DMatrix<f64>],
    scales: &[DMatrix<f64>],
    transpose: bool,
) -> DMatrix<f64> {
    let mut out = m.clone();
    for &j in selected {
        let (s, q) = (&bases[j], &scales[j]);
        let k = s.ncols();
        if k == 0 {
            continue;
        }
        let qi = q - DMatrix::identity(k, k);
        let qi = if transpose { qi.transpose() } else { qi };
        out += (m * s) * qi * s.transpose();
    }
    out
}

/// `A = I + sum_j S_j (Q_j - I) S_j^T`, so that `W_eff = W A`.
pub fn trgp_mixing(width: usize, selected: &[usize], bases: &[DMatrix<f64>], scales: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut a = DMatrix::identity(width, width);
    for &j in selected {
        let (s, q) = (&bases[j], &scales[j]);
        let k = s.ncols();
        a += s * (q - DMatrix::identity(k, k)) * s.transpose();
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_projection() {
        let g = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let m = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(gpm_project_gradient(&g, &m).unwrap(), DMatrix::from_row_slice(1, 2, &[0.0, 4.0]));
        assert_eq!(gpm_project_gradient(&g, &DMatrix::zeros(2, 0)).unwrap(), g);
        assert!(gpm_project_gradient(&g, &DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn rank_one_update() {
        let acts = DMatrix::from_fn(3, 5, |i, j| if i == 0 { j as f64 + 1.0 } else { 0.0 });
        for eps in [0.5, 0.9, 0.999] {
            let (m, added) = gpm_update_subspace(&DMatrix::zeros(3, 0), &acts, eps, None).unwrap();
            assert_eq!(added, 1);
            assert!((m[(0, 0)].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_inside_span_leave_basis() {
        let basis = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let acts = DMatrix::from_fn(3, 4, |i, j| if i == 1 { j as f64 - 1.5 } else { 0.0 });
        let (m, added) = gpm_update_subspace(&basis, &acts, 0.99, None).unwrap();
        assert_eq!(added, 0);
        assert_eq!(m, basis);
        let bad = DMatrix::from_element(3, 1, f64::NAN);
        assert!(gpm_update_subspace(&basis, &bad, 0.9, None).is_err());
    }

    #[test]
    fn nscl_examples() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let g = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let p = nscl_project_gradient(&g, Some(&cov), 10.0).unwrap();
        assert!((p - DMatrix::from_row_slice(1, 2, &[0.0, 4.0])).amax() < 1e-12);
        let zero = DMatrix::zeros(2, 2);
        assert!((nscl_project_gradient(&g, Some(&zero), 10.0).unwrap() - &g).amax() < 1e-12);
        assert_eq!(nscl_project_gradient(&g, None, 10.0).unwrap(), g);
    }

    #[test]
    fn low_rank_matches_dense() {
        let x = DMatrix::from_fn(5, 7, |i, j| ((i * 7 + j) as f64 * 0.61).sin());
        let mut cache = CovarianceCache::new(7);
        cache.accumulate(&x.rows(0, 3).into_owned());
        cache.accumulate(&x.rows(3, 2).into_owned());
        let cov = cache.covariance().unwrap();
        assert!((&cov - x.transpose() * &x / 5.0).amax() < 1e-12);
        let dense = nscl_projector(Some(&cov), 10.0, 7).unwrap();
        let low = LowRankProjector::nscl(&cache, 10.0).unwrap().to_dense();
        assert!((dense - low).amax() < 1e-9);
        let dense = adabop_from_outer(&cov, 3.0).unwrap();
        let low = LowRankProjector::adabop(&cache, 3.0).unwrap().to_dense();
        assert!((dense - low).amax() < 1e-9);
        assert_eq!(LowRankProjector::nscl(&CovarianceCache::new(3), 10.0).unwrap().to_dense(), DMatrix::identity(3, 3));
    }

    #[test]
    fn adabop_identity_cases() {
        let x = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        assert!((adabop_projection(&x, 0.0).unwrap() - DMatrix::identity(4, 4)).amax() < 1e-15);
        assert!((adabop_projection(&DMatrix::zeros(4, 3), 2.0).unwrap() - DMatrix::identity(4, 4)).amax() < 1e-15);
        assert!(adabop_projection(&DMatrix::from_element(2, 2, f64::INFINITY), 1.0).is_err());
    }

    #[test]
    fn trust_region_examples() {
        let s = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let inside = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let ortho = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        assert_eq!(trgp_trust_region(&inside, std::slice::from_ref(&s), 1.0), vec![0]);
        assert!(trgp_trust_region(&ortho, std::slice::from_ref(&s), 0.1).is_empty());
        assert!(trgp_trust_region(&DMatrix::zeros(1, 2), std::slice::from_ref(&s), 0.0).is_empty());
    }

    #[test]
    fn scaled_projection_examples() {
        let s = vec![DMatrix::from_column_slice(2, 1, &[1.0, 0.0])];
        let w = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let q = vec![DMatrix::from_element(1, 1, 2.0)];
        let eff = trgp_effective_weight(&w, &[0], &s, &q).unwrap();
        assert_eq!(eff, DMatrix::from_row_slice(1, 2, &[6.0, 4.0]));
        assert_eq!(trgp_effective_weight(&w, &[], &s, &q).unwrap(), w);
        let bad = vec![DMatrix::identity(2, 2)];
        assert!(trgp_effective_weight(&w, &[0], &s, &bad).is_err());
        assert_eq!(&w * trgp_mixing(2, &[0], &s, &q), eff);
        assert_eq!(trgp_mix_rows(&w, &[0], &s, &q, false), eff);
    }
}
