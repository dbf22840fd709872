//! Held-out evaluation: streaming R², class purity and sorted score curves.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::monoscore::{monoscore_linear, MonoScoreConfig};
use crate::sae::SaeModel;
use crate::types::{ActivationMatrix, FeatureMatrix, LatentScores};

/// Per-dimension running mean and squared deviation of the targets
/// (Welford), plus the running residual sum of squares.
#[derive(Debug, Clone, PartialEq)]
pub struct R2Accumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    ss_res: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct R2Summary {
    /// `None` for dimensions with zero target variance.
    pub per_dim: Vec<Option<f64>>,
    /// Mean over dimensions with non-zero variance.
    pub mean: f64,
    pub excluded: Vec<usize>,
}

impl R2Accumulator {
    pub fn new(dim: usize) -> Self {
        R2Accumulator {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            ss_res: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds a batch of targets `x` and reconstructions `xhat`, both `B x d`.
    pub fn update(&mut self, x: ArrayView2<'_, f64>, xhat: ArrayView2<'_, f64>) -> Result<()> {
        if x.dim() != xhat.dim() {
            return Err(Error::mismatch("R² batch rows", x.nrows(), xhat.nrows()));
        }
        if x.ncols() != self.dim() {
            return Err(Error::mismatch("R² dim", self.dim(), x.ncols()));
        }
        for (row, rhat) in x.axis_iter(Axis(0)).zip(xhat.axis_iter(Axis(0))) {
            self.count += 1;
            let n = self.count as f64;
            for j in 0..row.len() {
                let t = row[j];
                let delta = t - self.mean[j];
                self.mean[j] += delta / n;
                self.m2[j] += delta * (t - self.mean[j]);
                let r = t - rhat[j];
                self.ss_res[j] += r * r;
            }
        }
        Ok(())
    }

    /// Combines two accumulators as if their streams were concatenated.
    pub fn merge(&mut self, other: &R2Accumulator) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::mismatch("R² merge dim", self.dim(), other.dim()));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for j in 0..self.dim() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
            self.ss_res[j] += other.ss_res[j];
        }
        self.count += other.count;
        Ok(())
    }

    /// `R²_j = 1 − SS_res / SS_tot`. Zero-variance dimensions are excluded
    /// from the mean with a warning.
    pub fn finalize(&self) -> Result<R2Summary> {
        if self.count < 2 {
            return Err(Error::TooFewSamples(self.count));
        }
        let mut per_dim = Vec::with_capacity(self.dim());
        let mut excluded = Vec::new();
        let mut sum = 0.0;
        for j in 0..self.dim() {
            if self.m2[j] > 0.0 {
                let r2 = 1.0 - self.ss_res[j] / self.m2[j];
                sum += r2;
                per_dim.push(Some(r2));
            } else {
                log::warn!("R²: dimension {j} has zero variance, excluded from the mean");
                excluded.push(j);
                per_dim.push(None);
            }
        }
        let kept = self.dim() - excluded.len();
        if kept == 0 {
            return Err(Error::AllZeroVariance);
        }
        Ok(R2Summary {
            per_dim,
            mean: sum / kept as f64,
            excluded,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentPurity {
    pub latent: usize,
    pub dominant_class: Option<usize>,
    /// `|N_k|`, samples with a strictly positive activation.
    pub activation_count: usize,
    pub binary: Option<f64>,
    pub weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PurityReport {
    pub latents: Vec<LatentPurity>,
    pub active_latents: usize,
    pub mean_binary: Option<f64>,
    pub mean_weighted: Option<f64>,
}

/// Binary and weighted purity per latent, over samples with `a_kn > 0`.
///
/// The dominant class is the one with the most activating samples; ties go
/// to the lowest class id.
pub fn class_purity(a: &ActivationMatrix, labels: &[usize]) -> Result<PurityReport> {
    if labels.len() != a.n_samples() {
        return Err(Error::mismatch("labels", a.n_samples(), labels.len()));
    }
    let mut latents = Vec::with_capacity(a.n_latents());
    let (mut sum_b, mut sum_w, mut active) = (0.0, 0.0, 0usize);
    for (k, row) in a.view().axis_iter(Axis(0)).enumerate() {
        let mut per_class: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        let (mut count, mut mass) = (0usize, 0.0);
        for (&x, &y) in row.iter().zip(labels) {
            if x > 0.0 {
                let e = per_class.entry(y).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += x;
                count += 1;
                mass += x;
            }
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for (&class, &(c, m)) in &per_class {
            if best.is_none_or(|(_, bc, _)| c > bc) {
                best = Some((class, c, m));
            }
        }
        let entry = match best {
            Some((class, c, m)) => {
                let binary = c as f64 / count as f64;
                let weighted = m / mass;
                sum_b += binary;
                sum_w += weighted;
                active += 1;
                LatentPurity {
                    latent: k,
                    dominant_class: Some(class),
                    activation_count: count,
                    binary: Some(binary),
                    weighted: Some(weighted),
                }
            }
            None => LatentPurity {
                latent: k,
                dominant_class: None,
                activation_count: 0,
                binary: None,
                weighted: None,
            },
        };
        latents.push(entry);
    }
    let mean = |s: f64| (active > 0).then(|| s / active as f64);
    Ok(PurityReport {
        latents,
        active_latents: active,
        mean_binary: mean(sum_b),
        mean_weighted: mean(sum_w),
    })
}

/// Scores sorted in decreasing order against `i / (M − 1)`.
///
/// The sort is stable, so equal scores keep their latent order. A single
/// latent sits at x = 0.
pub fn monoscore_curve(scores: &LatentScores) -> Vec<(f64, f64)> {
    let mut sorted = scores.scores.clone();
    sorted.sort_by(|x, y| y.total_cmp(x));
    let denom = sorted.len().saturating_sub(1).max(1) as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i as f64 / denom, s))
        .collect()
}

pub const CURVE_CSV_HEADER: &str = "normalized_index,monoscore";
pub const SUMMARY_CSV_HEADER: &str = "metric,value";
pub const PURITY_CSV_HEADER: &str =
    "latent_index,dominant_class,activation_count,binary_purity,weighted_purity";

pub fn write_curve_csv<W: Write>(mut out: W, curve: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(out, "{CURVE_CSV_HEADER}")?;
    for (x, y) in curve {
        writeln!(out, "{x},{y}")?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(mut out: W, rows: &[(&str, f64)]) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_CSV_HEADER}")?;
    for (name, value) in rows {
        writeln!(out, "{name},{value}")?;
    }
    Ok(())
}

pub fn write_purity_csv<W: Write>(mut out: W, report: &PurityReport) -> std::io::Result<()> {
    fn opt<T: ToString>(v: Option<T>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }
    writeln!(out, "{PURITY_CSV_HEADER}")?;
    for l in &report.latents {
        writeln!(
            out,
            "{},{},{},{},{}",
            l.latent,
            opt(l.dominant_class),
            l.activation_count,
            opt(l.binary),
            opt(l.weighted)
        )?;
    }
    Ok(())
}

/// Everything computed from one pass of a model over a dataset.
#[derive(Debug, Clone)]
pub struct ModelEval {
    /// `None` when R² is undefined (fewer than two samples, or every
    /// dimension constant).
    pub r2: Option<R2Summary>,
    pub scores: LatentScores,
    pub activations: ActivationMatrix,
    /// Latents that never fire on the dataset.
    pub dead_latents: usize,
}

/// Encodes `features` in batches, then scores reconstructions and latents.
/// MonoScore uses the features themselves as the similarity space.
pub fn evaluate_model(
    model: &SaeModel,
    features: &FeatureMatrix,
    batch_size: usize,
    epsilon_den: f64,
) -> Result<ModelEval> {
    let (activations, recon) = model.encode_dataset(features, batch_size)?;
    let mut acc = R2Accumulator::new(features.dim());
    acc.update(features.view(), recon.view())?;
    let r2 = match acc.finalize() {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("R² unavailable: {e}");
            None
        }
    };
    let cfg = MonoScoreConfig {
        epsilon_den,
        ..Default::default()
    };
    let scores = monoscore_linear(features, &activations, &cfg)?;
    let dead_latents = activations
        .view()
        .axis_iter(Axis(0))
        .filter(|row| row.iter().all(|&x| x <= 0.0))
        .count();
    Ok(ModelEval {
        r2,
        scores,
        activations,
        dead_latents,
    })
}
