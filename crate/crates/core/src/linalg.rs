//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn quad_form(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(p * x))
}

/// Extreme eigenvalues `(min, max)` of the symmetric part of `m`.
pub fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let ev = symmetrize(m).symmetric_eigenvalues();
    (ev.min(), ev.max())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    eig_range(m).0
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    eig_range(m).1
}

/// Returns `F` with `FᵀF = P` for a symmetric PSD `P`; rows belonging to
/// numerically zero eigenvalues are dropped.
pub fn psd_factor(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(p).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > 1e-14 * scale)
        .collect();
    let mut f = DMatrix::zeros(keep.len(), p.ncols());
    for (row, &k) in keep.iter().enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        for c in 0..p.ncols() {
            f[(row, c)] = s * eig.eigenvectors[(c, k)];
        }
    }
    f
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(p)
        .cholesky()
        .ok_or_else(|| Error::Solver("matrix is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Cholesky factor `L` with `P = L Lᵀ`.
pub fn spd_cholesky(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetrize(p)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Solver("matrix is not positive definite".into()))
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

/// Numerical rank from singular values, relative threshold.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    sv.iter().filter(|&&s| s > rel_tol * top.max(1e-300)).count()
}

/// Orthonormal basis of the null space of `m` (columns).
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // pad to square so the SVD exposes all right singular vectors
    let mut padded = DMatrix::zeros(m.nrows().max(n), n);
    padded.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let top = svd.singular_values.max().max(1e-300);
    let cols: Vec<usize> = (0..n)
        .filter(|&k| svd.singular_values[k] <= rel_tol * top)
        .collect();
    DMatrix::from_fn(n, cols.len(), |r, c| v_t[(cols[c], r)])
}

/// Serde adapter storing a matrix as row-major nested arrays.
pub mod rows_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// [`rows_serde`] for a list of matrices.
pub mod rows_serde_vec {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(super::to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?
            .iter()
            .map(|rows| super::from_rows(rows).map_err(serde::de::Error::custom))
            .collect()
    }
}
