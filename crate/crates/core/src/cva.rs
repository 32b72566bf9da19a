//! Canonical variate analysis of lagged sensor data.
//!
//! Past vectors stack the `p` most recent observations newest-first and
//! future vectors stack the next `f` observations oldest-first. The fitted
//! model maps a standardized past vector to system variates `Z` (the `r`
//! directions with the largest past/future canonical correlation) and to
//! the residual `E` left outside that subspace.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, matrix_serde};

#[derive(Debug, Clone, PartialEq)]
pub struct LaggedMatrices {
    /// `m·p × Ñ`
    pub past: DMatrix<f64>,
    /// `m·f × Ñ`
    pub future: DMatrix<f64>,
    pub p: usize,
    pub f: usize,
}

impl LaggedMatrices {
    pub fn n_samples(&self) -> usize {
        self.past.ncols()
    }
}

/// Build the past/future matrices from an `m × N` series.
///
/// Column `j` (0-based) corresponds to time `k = p + 1 + j` and holds
/// `[x_{k-1}, …, x_{k-p}]` in the past block and `[x_k, …, x_{k+f-1}]` in
/// the future block, giving `Ñ = N − f − p + 1` columns.
pub fn build_lagged_matrices(x: &DMatrix<f64>, p: usize, f: usize) -> Result<LaggedMatrices> {
    if p == 0 || f == 0 {
        return Err(Error::Config("lag counts p and f must be at least 1".into()));
    }
    let (m, n) = x.shape();
    if n < p + f {
        return Err(Error::InsufficientData { needed: p + f, got: n });
    }
    let n_eff = n - f - p + 1;
    let mut past = DMatrix::zeros(m * p, n_eff);
    let mut future = DMatrix::zeros(m * f, n_eff);
    for j in 0..n_eff {
        // 0-based index of x_k
        let k = p + j;
        for lag in 0..p {
            past.view_mut((lag * m, j), (m, 1))
                .copy_from(&x.column(k - 1 - lag));
        }
        for lead in 0..f {
            future
                .view_mut((lead * m, j), (m, 1))
                .copy_from(&x.column(k + lead));
        }
    }
    Ok(LaggedMatrices { past, future, p, f })
}

/// Past vectors for monitoring: column `j` is `[x_k, x_{k-1}, …, x_{k-p+1}]`
/// for the 1-based cycle `k = p + j`, i.e. each column is labelled by the
/// newest observation it contains. This is the Eq.-style past vector of time
/// `k + 1`, so a statistic for cycle `k` is available as soon as `x_k` arrives.
pub fn past_vectors(x: &DMatrix<f64>, p: usize) -> Result<DMatrix<f64>> {
    let (m, n) = x.shape();
    if p == 0 {
        return Err(Error::Config("lag count p must be at least 1".into()));
    }
    if n < p {
        return Err(Error::InsufficientData { needed: p, got: n });
    }
    let cols = n - p + 1;
    let mut out = DMatrix::zeros(m * p, cols);
    for j in 0..cols {
        let newest = p - 1 + j;
        for lag in 0..p {
            out.view_mut((lag * m, j), (m, 1))
                .copy_from(&x.column(newest - lag));
        }
    }
    Ok(out)
}

/// Per-variable z-score parameters; variables are matrix rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizerFit {
    pub standardizer: Standardizer,
    /// Variables whose spread was zero; they are centered with unit scale.
    pub floored: Vec<usize>,
}

impl Standardizer {
    pub fn identity(m: usize) -> Self {
        Self {
            mean: vec![0.0; m],
            std: vec![1.0; m],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fit over the columns of `x` (variables in rows, sample std with `n − 1`).
    pub fn fit(x: &DMatrix<f64>) -> Result<StandardizerFit> {
        Self::fit_pooled(std::slice::from_ref(x))
    }

    /// Fit one set of parameters over the concatenated columns of every block.
    pub fn fit_pooled(blocks: &[DMatrix<f64>]) -> Result<StandardizerFit> {
        let m = blocks.first().map(|b| b.nrows()).unwrap_or(0);
        if blocks.iter().any(|b| b.nrows() != m) {
            return Err(Error::Shape {
                expected: format!("{m} variables in every block"),
                got: "blocks with differing row counts".into(),
            });
        }
        let n: usize = blocks.iter().map(|b| b.ncols()).sum();
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        let mut mean = vec![0.0; m];
        for b in blocks {
            for (i, row) in b.row_iter().enumerate() {
                mean[i] += row.sum();
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; m];
        for b in blocks {
            for (i, row) in b.row_iter().enumerate() {
                var[i] += row.iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>();
            }
        }
        let mut floored = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let s = (v / (n as f64 - 1.0)).sqrt();
                if !(s > 1e-12 * mean[i].abs().max(1.0)) {
                    floored.push(i);
                    1.0
                } else {
                    s
                }
            })
            .collect();
        if !floored.is_empty() {
            log::warn!("zero-variance variables {floored:?}: centered without scaling");
        }
        Ok(StandardizerFit {
            standardizer: Standardizer { mean, std },
            floored,
        })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.dim() {
            return Err(Error::Shape {
                expected: format!("{} variables", self.dim()),
                got: format!("{} rows", x.nrows()),
            });
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[i]) / self.std[i]
        }))
    }

    pub fn apply_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                expected: format!("{} variables", self.dim()),
                got: format!("{}", x.len()),
            });
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (mu, sd))| (v - mu) / sd)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaModel {
    pub standardizer: Standardizer,
    pub p: usize,
    pub f: usize,
    pub r: usize,
    /// `Σ_pp^{-1/2}`, `m·p × m·p`
    #[serde(with = "matrix_serde")]
    pub whitening: DMatrix<f64>,
    /// Leading right singular vectors, `m·p × r`
    #[serde(with = "matrix_serde")]
    pub v_r: DMatrix<f64>,
    /// Canonical correlations, nonincreasing.
    pub singular_values: Vec<f64>,
    /// `V_rᵀ W`, `r × m·p`
    #[serde(with = "matrix_serde")]
    pub system_transform: DMatrix<f64>,
    /// `(I − V_r V_rᵀ) W`, `m·p × m·p`
    #[serde(with = "matrix_serde")]
    pub residual_transform: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub z: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

/// Fit the canonical transforms on already standardized lagged matrices.
///
/// `standardizer` is the one used to produce `lagged` and is stored with the
/// model so that raw data can be projected later.
pub fn fit_cva(lagged: &LaggedMatrices, r: usize, standardizer: Standardizer) -> Result<CvaModel> {
    let mp = lagged.past.nrows();
    let mf = lagged.future.nrows();
    let rank = mp.min(mf);
    if r == 0 || r > rank {
        return Err(Error::Config(format!(
            "retained variate count r = {r} must lie in 1..={rank}"
        )));
    }
    if lagged.p == 0 || !mp.is_multiple_of(lagged.p) || standardizer.dim() * lagged.p != mp {
        return Err(Error::Shape {
            expected: format!("{} past rows", standardizer.dim() * lagged.p),
            got: format!("{mp}"),
        });
    }
    let n = lagged.n_samples();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }

    let s_pp = linalg::covariance(&lagged.past)?;
    let s_ff = linalg::covariance(&lagged.future)?;
    let s_fp = linalg::cross_covariance(&lagged.future, &lagged.past)?;
    let w_p = linalg::inv_sqrt_psd(&s_pp)?;
    let w_f = linalg::inv_sqrt_psd(&s_ff)?;
    let h = &w_f * s_fp * &w_p;

    let svd = h.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not return right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if svd.singular_values.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite canonical correlation".into()));
    }
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let v_r = DMatrix::from_fn(mp, r, |i, j| v_t[(order[j], i)]);

    let system_transform = v_r.transpose() * &w_p;
    let residual_transform = (DMatrix::identity(mp, mp) - &v_r * v_r.transpose()) * &w_p;

    Ok(CvaModel {
        standardizer,
        p: lagged.p,
        f: lagged.f,
        r,
        whitening: w_p,
        v_r,
        singular_values,
        system_transform,
        residual_transform,
    })
}

const FORMAT_TAG: &str = "rulcp-cva";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CvaArtifact {
    format: String,
    version: u32,
    model: CvaModel,
}

impl CvaModel {
    /// Standardize `x` (raw `m × N`), lag it and fit with the given `r`.
    pub fn fit_raw(x: &DMatrix<f64>, p: usize, f: usize, r: usize) -> Result<CvaModel> {
        let fit = Standardizer::fit(x)?;
        let xs = fit.standardizer.apply(x)?;
        let lagged = build_lagged_matrices(&xs, p, f)?;
        fit_cva(&lagged, r, fit.standardizer)
    }

    pub fn n_channels(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn past_dim(&self) -> usize {
        self.whitening.nrows()
    }

    /// Project standardized past vectors (`m·p × Ñ'`).
    pub fn project(&self, past: &DMatrix<f64>) -> Result<Projection> {
        if past.nrows() != self.past_dim() {
            return Err(Error::Shape {
                expected: format!("{} rows", self.past_dim()),
                got: format!("{} rows", past.nrows()),
            });
        }
        Ok(Projection {
            z: &self.system_transform * past,
            e: &self.residual_transform * past,
        })
    }

    pub fn project_vector(&self, past: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if past.len() != self.past_dim() {
            return Err(Error::Shape {
                expected: format!("{} entries", self.past_dim()),
                got: format!("{}", past.len()),
            });
        }
        Ok((&self.system_transform * past, &self.residual_transform * past))
    }

    /// Standardize a raw `m × N` series and project its per-cycle past
    /// vectors. Returns the projection and the 1-based cycle of column 0.
    pub fn project_series(&self, raw: &DMatrix<f64>) -> Result<(Projection, usize)> {
        let xs = self.standardizer.apply(raw)?;
        let past = past_vectors(&xs, self.p)?;
        Ok((self.project(&past)?, self.p))
    }

    fn check_shapes(&self) -> Result<()> {
        let mp = self.n_channels() * self.p;
        let ok = self.whitening.shape() == (mp, mp)
            && self.v_r.shape() == (mp, self.r)
            && self.system_transform.shape() == (self.r, mp)
            && self.residual_transform.shape() == (mp, mp)
            && self.r >= 1
            && self.r <= mp;
        if ok {
            Ok(())
        } else {
            Err(Error::Integrity("CVA artifact has inconsistent matrix shapes".into()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let art = CvaArtifact {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&art)?)
    }

    pub fn from_json(text: &str) -> Result<CvaModel> {
        let art: CvaArtifact = serde_json::from_str(text)?;
        if art.format != FORMAT_TAG || art.version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported CVA artifact {} v{}",
                art.format, art.version
            )));
        }
        art.model.check_shapes()?;
        Ok(art.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<CvaModel> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
