//! Batch-wise MonoLoss `1 − mean_k∈active MS_k(batch)` and its analytic
//! gradient with respect to the raw activations.
//!
//! Within a batch the activations are min-max normalized with batch-local
//! extrema, then scored with the same streaming statistics as
//! [`crate::monoscore::monoscore_linear`]. The embeddings `h` are constants.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monoscore::{batch_stats, finalize_scores, Extrema, DEFAULT_EPSILON_DEN};
use crate::types::{LatentScores, MonoStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonoLossConfig {
    pub lambda: f64,
    pub epsilon_den: f64,
}

impl Default for MonoLossConfig {
    fn default() -> Self {
        MonoLossConfig {
            lambda: 0.0,
            epsilon_den: DEFAULT_EPSILON_DEN,
        }
    }
}

impl MonoLossConfig {
    pub fn new(lambda: f64) -> Self {
        MonoLossConfig {
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon_den > 0.0) {
            return Err(Error::InvalidConfig("epsilon_den must be positive".into()));
        }
        Ok(())
    }
}

/// Forward-only result.
#[derive(Debug, Clone, PartialEq)]
pub struct MonoLossValue {
    pub loss: f64,
    pub active_count: usize,
    pub scores: LatentScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoLossOutput {
    pub loss: f64,
    /// `M x B`, `∂L_mono / ∂a_kn`.
    pub grad_activations: Array2<f64>,
    pub active_count: usize,
    pub scores: LatentScores,
}

struct BatchForward {
    normalized: Array2<f64>,
    stats: MonoStats,
    scores: LatentScores,
    loss: f64,
}

fn check(h: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<()> {
    if h.nrows() != a.ncols() {
        return Err(Error::mismatch("monoloss batch samples", h.nrows(), a.ncols()));
    }
    if h.nrows() == 0 || a.nrows() == 0 {
        return Err(Error::Empty {
            rows: a.nrows(),
            cols: h.nrows(),
        });
    }
    Ok(())
}

fn forward_impl(
    h: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    cfg: &MonoLossConfig,
) -> Result<BatchForward> {
    check(h, a)?;
    let normalized = Extrema::of(a).normalize(a, true)?.into_inner();
    let stats = batch_stats(h, normalized.view())?;
    let score_cfg = crate::monoscore::MonoScoreConfig {
        epsilon_den: cfg.epsilon_den,
        ..Default::default()
    };
    let scores = finalize_scores(&stats, &score_cfg);
    let loss = match scores.mean_active() {
        Some(mean) => 1.0 - mean,
        None => 1.0,
    };
    Ok(BatchForward {
        normalized,
        stats,
        scores,
        loss,
    })
}

/// `h` is the `B x d` batch of unit embeddings, `a` the raw `M x B`
/// activations of the same samples.
pub fn monoloss_forward(
    h: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    cfg: &MonoLossConfig,
) -> Result<MonoLossValue> {
    let fwd = forward_impl(h, a, cfg)?;
    Ok(MonoLossValue {
        loss: fwd.loss,
        active_count: fwd.scores.active_count(),
        scores: fwd.scores,
    })
}

/// First index of the minimum and of the maximum.
fn arg_extrema(row: ndarray::ArrayView1<'_, f64>) -> (usize, usize) {
    let (mut imin, mut imax) = (0, 0);
    for (i, &x) in row.iter().enumerate() {
        if x < row[imin] {
            imin = i;
        }
        if x > row[imax] {
            imax = i;
        }
    }
    (imin, imax)
}

/// Loss and gradient with respect to the raw activations `a`.
///
/// Through the batch min-max, the entries at the first arg-min and first
/// arg-max act as the extrema; their own normalized values are the constants
/// 0 and 1. Inactive latents get an all-zero gradient row.
pub fn monoloss_backward(
    h: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    cfg: &MonoLossConfig,
) -> Result<MonoLossOutput> {
    let fwd = forward_impl(h, a, cfg)?;
    let (m, b) = a.dim();
    let mut grad = Array2::zeros((m, b));
    let active_count = fwd.scores.active_count();
    if active_count == 0 {
        return Ok(MonoLossOutput {
            loss: fwd.loss,
            grad_activations: grad,
            active_count,
            scores: fwd.scores,
        });
    }

    // proj[n, k] = h_n · w_k
    let proj = h.dot(&fwd.stats.w);
    let q = fwd.stats.w.mapv(|x| x * x).sum_axis(Axis(0));
    let scale = -1.0 / active_count as f64;
    let mut g = vec![0.0; b];

    for k in 0..m {
        if !fwd.scores.active[k] {
            continue;
        }
        let u = fwd.stats.u[k];
        let v = fwd.stats.v[k];
        let num = 0.5 * (q[k] - v);
        let den = 0.5 * (u * u - v);
        let inv_den2 = 1.0 / (den * den);
        let an = fwd.normalized.row(k);
        // gradient with respect to normalized activations
        for n in 0..b {
            let dnum = proj[[n, k]] - an[n];
            let dden = u - an[n];
            g[n] = scale * (dnum * den - num * dden) * inv_den2;
        }

        let raw = a.row(k);
        let (imin, imax) = arg_extrema(raw);
        let range = raw[imax] - raw[imin];
        let inv_r = 1.0 / range;
        let s1: f64 = g.iter().sum();
        let s2: f64 = g.iter().zip(an).map(|(gn, x)| gn * x).sum();
        let mut row = grad.row_mut(k);
        for n in 0..b {
            row[n] = g[n] * inv_r;
        }
        row[imin] += (s2 - s1) * inv_r;
        row[imax] -= s2 * inv_r;
    }

    Ok(MonoLossOutput {
        loss: fwd.loss,
        grad_activations: grad,
        active_count,
        scores: fwd.scores,
    })
}

/// `L = L_base + λ L_mono`.
pub fn total_loss(base: f64, mono_loss: f64, cfg: &MonoLossConfig) -> f64 {
    if cfg.lambda == 0.0 {
        return base;
    }
    base + cfg.lambda * mono_loss
}
