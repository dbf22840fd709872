//! Shared numeric containers.
//!
//! Features are stored sample-major (`N x d`), activations latent-major
//! (`M x N`). Everything is `f64`; narrower inputs are widened on load.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows with a Euclidean norm below this are rejected by [`normalize_rows`].
pub const ZERO_ROW_NORM: f64 = 1e-12;

/// `N x d` matrix of unit-norm embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
}

/// Divides every row by its Euclidean norm.
pub fn normalize_rows(mut raw: Array2<f64>) -> Result<FeatureMatrix> {
    let (rows, cols) = raw.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Empty { rows, cols });
    }
    for (i, mut row) in raw.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                what: format!("feature row {i}"),
            });
        }
        if norm < ZERO_ROW_NORM {
            return Err(Error::ZeroRow(i));
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(FeatureMatrix { data: raw })
}

impl FeatureMatrix {
    /// Normalizes `raw` row-wise; see [`normalize_rows`].
    pub fn new(raw: Array2<f64>) -> Result<Self> {
        normalize_rows(raw)
    }

    /// Wraps rows the caller already knows to be unit norm.
    pub(crate) fn from_unit_rows(data: Array2<f64>) -> Self {
        FeatureMatrix { data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Contiguous block of samples.
    pub fn rows(&self, range: Range<usize>) -> ArrayView2<'_, f64> {
        self.data.slice(s![range, ..])
    }

    /// Gathers the given samples into a new matrix. Rows stay unit-norm.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data.select(Axis(0), indices),
        }
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// `M x N` activation matrix, one row per latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    data: Array2<f64>,
    normalized: bool,
}

impl ActivationMatrix {
    /// Raw activations, latent-major.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::Empty { rows, cols });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "activation matrix".into(),
            });
        }
        Ok(ActivationMatrix {
            data,
            normalized: false,
        })
    }

    /// Activations already in `[0, 1]`; rejects anything outside.
    pub fn new_normalized(data: Array2<f64>) -> Result<Self> {
        let mut m = Self::new(data)?;
        for ((latent, sample), &value) in m.data.indexed_iter() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::NotNormalized {
                    latent,
                    sample,
                    value,
                });
            }
        }
        m.normalized = true;
        Ok(m)
    }

    /// Builds from a sample-major `N x M` array (the on-disk layout).
    pub fn from_sample_major(data: ArrayView2<'_, f64>) -> Result<Self> {
        Self::new(data.t().as_standard_layout().into_owned())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    /// Skips validation; callers guarantee `[0, 1]` entries.
    pub(crate) fn normalized_unchecked(data: Array2<f64>) -> Self {
        ActivationMatrix {
            data,
            normalized: true,
        }
    }

    pub fn n_latents(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    /// Contiguous block of samples (columns).
    pub fn samples(&self, range: Range<usize>) -> ArrayView2<'_, f64> {
        self.data.slice(s![.., range])
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::mismatch("row length", cols, bad.len()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat)
        .map_err(|_| Error::Empty {
            rows: rows.len(),
            cols,
        })
}

/// Running sums for the single-pass MonoScore.
///
/// `u_k = sum ã_kn`, `v_k = sum ã_kn²`, `w[:, k] = sum ã_kn h_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonoStats {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    /// `d x M`.
    pub w: Array2<f64>,
    pub n_seen: u64,
}

impl MonoStats {
    pub fn zeros(dim: usize, n_latents: usize) -> Self {
        MonoStats {
            u: Array1::zeros(n_latents),
            v: Array1::zeros(n_latents),
            w: Array2::zeros((dim, n_latents)),
            n_seen: 0,
        }
    }

    pub fn n_latents(&self) -> usize {
        self.u.len()
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    fn check_compatible(&self, other: &MonoStats) -> Result<()> {
        if self.n_latents() != other.n_latents() {
            return Err(Error::mismatch(
                "merge latents",
                self.n_latents(),
                other.n_latents(),
            ));
        }
        if self.dim() != other.dim() {
            return Err(Error::mismatch("merge dim", self.dim(), other.dim()));
        }
        Ok(())
    }

    /// Adds `other` into `self`. The order of merges fixes the floating-point
    /// result: folding shards left to right is bit-reproducible.
    pub fn merge_from(&mut self, other: &MonoStats) -> Result<()> {
        self.check_compatible(other)?;
        self.u += &other.u;
        self.v += &other.v;
        self.w += &other.w;
        self.n_seen += other.n_seen;
        Ok(())
    }
}

/// Componentwise sum of two statistics records.
pub fn merge_stats(a: &MonoStats, b: &MonoStats) -> Result<MonoStats> {
    let mut out = a.clone();
    out.merge_from(b)?;
    Ok(out)
}

/// Per-latent MonoScore with the mask of latents whose denominator was
/// numerically non-zero. Inactive latents carry a score of exactly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScores {
    pub scores: Vec<f64>,
    pub active: Vec<bool>,
}

impl LatentScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Mean over active latents, `None` if there are none.
    pub fn mean_active(&self) -> Option<f64> {
        let n = self.active_count();
        if n == 0 {
            return None;
        }
        let sum: f64 = self
            .scores
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(s, _)| s)
            .sum();
        Some(sum / n as f64)
    }

    /// Mean over all latents, inactive ones counting as 0.
    pub fn mean_all(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}
