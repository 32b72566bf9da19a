//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative eigenvalue floor used when inverting covariance square roots.
pub const EIGEN_FLOOR_REL: f64 = 1e-8;

/// Row-major matrix with an explicit shape header, the on-disk layout for
/// every matrix in JSON artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(m.row(i).iter().copied());
        }
        MatrixRecord { rows, cols, data }
    }
}

impl MatrixRecord {
    pub fn into_matrix(self) -> Result<DMatrix<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::Integrity(format!(
                "matrix header {}x{} does not match {} stored values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// `#[serde(with = "crate::linalg::matrix_serde")]` for `DMatrix<f64>` fields.
pub mod matrix_serde {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRecord::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rec = MatrixRecord::deserialize(d)?;
        rec.into_matrix().map_err(serde::de::Error::custom)
    }
}

pub fn row_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols() as f64;
    DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.sum() / n))
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mu = row_means(x);
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= &mu;
    }
    c
}

/// Sample cross-covariance `(a - ā)(b - b̄)ᵀ / (n - 1)` for variables in rows.
pub fn cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape {
            expected: format!("{} samples", a.ncols()),
            got: format!("{} samples", b.ncols()),
        });
    }
    let n = a.ncols();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let ac = centered(a);
    let bc = centered(b);
    Ok(ac * bc.transpose() / (n as f64 - 1.0))
}

pub fn covariance(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    cross_covariance(a, a)
}

/// `Σ^{-1/2}` through a symmetric eigendecomposition, with eigenvalues
/// floored at `EIGEN_FLOOR_REL × λ_max`.
pub fn inv_sqrt_psd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(Error::Shape {
            expected: "square covariance".into(),
            got: format!("{}x{}", sigma.nrows(), sigma.ncols()),
        });
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("covariance has non-finite entries".into()));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return Err(Error::Numeric(
            "covariance has no positive eigenvalue".into(),
        ));
    }
    let lmin = eig.eigenvalues.min();
    if lmin < -1e-6 * lmax {
        return Err(Error::Numeric(format!(
            "covariance is not positive semidefinite (λ_min = {lmin:e}, λ_max = {lmax:e})"
        )));
    }
    let floor = EIGEN_FLOOR_REL * lmax;
    let scale = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    let q = &eig.eigenvectors;
    let qs = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * scale[j]);
    Ok(qs * q.transpose())
}
