//! MonoScore: activation-weighted mean cosine similarity between samples
//! that co-activate a latent.
//!
//! Two routes compute the same quantity:
//!
//! * [`monoscore_pairwise`] sums over every unordered pair of samples,
//!   `O(N² (d + M))`. Kept as the reference and benchmark baseline.
//! * [`monoscore_linear`] streams the samples once, accumulating
//!   [`MonoStats`], then uses
//!   `num_k = ½(‖w_k‖² − v_k)` and `den_k = ½(u_k² − v_k)`, `O(N d M)`.
//!
//! Activations are min-max normalized per latent over the scored set before
//! either route runs. A latent whose denominator is at most `epsilon_den`
//! is reported inactive with score 0.

use std::borrow::Cow;
use std::io::Write;
use std::thread;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ActivationMatrix, FeatureMatrix, LatentScores, MonoStats};

pub const DEFAULT_EPSILON_DEN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonoScoreConfig {
    /// Denominators at or below this count as zero.
    pub epsilon_den: f64,
    /// Tile edge for the pairwise loop.
    pub pair_block: usize,
    /// Samples per chunk for the streaming route.
    pub batch_size: usize,
}

impl Default for MonoScoreConfig {
    fn default() -> Self {
        MonoScoreConfig {
            epsilon_den: DEFAULT_EPSILON_DEN,
            pair_block: 64,
            batch_size: 1024,
        }
    }
}

impl MonoScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_den > 0.0) || !self.epsilon_den.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon_den must be positive, got {}",
                self.epsilon_den
            )));
        }
        if self.pair_block == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "pair_block and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pairwise,
    Linear,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Pairwise => "pairwise",
            Algorithm::Linear => "linear",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Algorithm::Pairwise),
            "linear" => Ok(Algorithm::Linear),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Per-latent minimum and maximum over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrema {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Extrema {
    /// Identity element for [`Extrema::update`].
    pub fn empty(n_latents: usize) -> Self {
        Extrema {
            min: vec![f64::INFINITY; n_latents],
            max: vec![f64::NEG_INFINITY; n_latents],
        }
    }

    /// Extrema of a latent-major `M x N` block.
    pub fn of(a: ArrayView2<'_, f64>) -> Self {
        let mut e = Extrema::empty(a.nrows());
        e.update(a);
        e
    }

    pub fn update(&mut self, a: ArrayView2<'_, f64>) {
        for (k, row) in a.axis_iter(Axis(0)).enumerate() {
            for &x in row {
                if x < self.min[k] {
                    self.min[k] = x;
                }
                if x > self.max[k] {
                    self.max[k] = x;
                }
            }
        }
    }

    pub fn n_latents(&self) -> usize {
        self.min.len()
    }

    /// In-place form of [`Extrema::normalize`] without validation.
    fn scale_rows(&self, out: &mut ArrayViewMut2<'_, f64>, clamp: bool) {
        for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let lo = self.min[k];
            let range = self.max[k] - lo;
            if range > 0.0 && range.is_finite() {
                row.mapv_inplace(|x| {
                    let t = (x - lo) / range;
                    if clamp {
                        t.clamp(0.0, 1.0)
                    } else {
                        t
                    }
                });
            } else {
                row.fill(0.0);
            }
        }
    }

    /// Applies `(a − min) / (max − min)` row-wise. A latent with
    /// `max == min` maps to all zeros. With `clamp`, values outside the stored
    /// range are clipped into `[0, 1]`, which is required when these extrema
    /// were measured on different data.
    pub fn normalize(&self, a: ArrayView2<'_, f64>, clamp: bool) -> Result<ActivationMatrix> {
        if a.nrows() != self.n_latents() {
            return Err(Error::mismatch("extrema latents", self.n_latents(), a.nrows()));
        }
        let mut out = a.to_owned();
        self.scale_rows(&mut out.view_mut(), clamp);
        if clamp {
            Ok(ActivationMatrix::normalized_unchecked(out))
        } else {
            ActivationMatrix::new_normalized(out)
        }
    }
}

/// Min-max normalizes each latent over the samples of `a`.
///
/// Constant latents become all-zero and therefore inactive.
pub fn minmax_normalize(a: &ActivationMatrix) -> ActivationMatrix {
    let view = a.view();
    Extrema::of(view)
        .normalize(view, true)
        .expect("extrema computed from the same matrix")
}

fn normalized<'a>(a: &'a ActivationMatrix) -> Cow<'a, ActivationMatrix> {
    if a.is_normalized() {
        Cow::Borrowed(a)
    } else {
        Cow::Owned(minmax_normalize(a))
    }
}

fn check_pair(h: &FeatureMatrix, a: &ActivationMatrix) -> Result<()> {
    if h.n_samples() != a.n_samples() {
        return Err(Error::mismatch(
            "activation samples vs features",
            h.n_samples(),
            a.n_samples(),
        ));
    }
    Ok(())
}

fn ratio_scores(num: &[f64], den: &[f64], epsilon_den: f64) -> LatentScores {
    let mut scores = Vec::with_capacity(num.len());
    let mut active = Vec::with_capacity(num.len());
    for (&n, &d) in num.iter().zip(den) {
        if d > epsilon_den {
            scores.push(n / d);
            active.push(true);
        } else {
            scores.push(0.0);
            active.push(false);
        }
    }
    LatentScores { scores, active }
}

/// Reference route: explicit sum over all pairs `n < m`.
///
/// The pair triangle is walked in square tiles of `pair_block` samples so the
/// working set stays in cache; inside a tile every pair updates all `M`
/// numerators and denominators.
pub fn monoscore_pairwise(
    h: &FeatureMatrix,
    a: &ActivationMatrix,
    cfg: &MonoScoreConfig,
) -> Result<LatentScores> {
    cfg.validate()?;
    check_pair(h, a)?;
    let na = normalized(a);
    let n = h.n_samples();
    let d = h.dim();
    let m = na.n_latents();

    let feats = h.as_array().as_standard_layout();
    let feats = feats.as_slice().expect("standard layout");
    // sample-major so each pair touches two contiguous rows
    let acts = na.view().t().as_standard_layout().into_owned();
    let acts = acts.as_slice().expect("standard layout");

    let mut num = vec![0.0; m];
    let mut den = vec![0.0; m];
    let block = cfg.pair_block;
    for i0 in (0..n).step_by(block) {
        let i1 = (i0 + block).min(n);
        for j0 in (i0..n).step_by(block) {
            let j1 = (j0 + block).min(n);
            for i in i0..i1 {
                let hi = &feats[i * d..(i + 1) * d];
                let ai = &acts[i * m..(i + 1) * m];
                for j in j0.max(i + 1)..j1 {
                    let hj = &feats[j * d..(j + 1) * d];
                    let aj = &acts[j * m..(j + 1) * m];
                    let sim: f64 = hi.iter().zip(hj).map(|(x, y)| x * y).sum();
                    for (((nk, dk), &x), &y) in num.iter_mut().zip(den.iter_mut()).zip(ai).zip(aj) {
                        let r = x * y;
                        *nk += r * sim;
                        *dk += r;
                    }
                }
            }
        }
    }
    Ok(ratio_scores(&num, &den, cfg.epsilon_den))
}

/// Statistics of one batch, starting from zero.
///
/// `h` is `B x d`, `a` is the normalized `M x B` block of the same samples.
pub fn batch_stats(h: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<MonoStats> {
    if h.nrows() != a.ncols() {
        return Err(Error::mismatch("batch samples", h.nrows(), a.ncols()));
    }
    let u = a.sum_axis(Axis(1));
    let v = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let w = h.t().dot(&a.t());
    Ok(MonoStats {
        u,
        v,
        w,
        n_seen: h.nrows() as u64,
    })
}

/// Adds one batch to running statistics.
///
/// The batch is reduced on its own first and then merged, so accumulating
/// batches `b1, b2, ...` is bitwise identical to merging their separate
/// [`batch_stats`] in the same order. For full-dataset scoring `a` must be
/// normalized with dataset-global extrema.
pub fn accumulate_stats(
    stats: &mut MonoStats,
    h: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
) -> Result<()> {
    if h.ncols() != stats.dim() {
        return Err(Error::mismatch("feature dim", stats.dim(), h.ncols()));
    }
    if a.nrows() != stats.n_latents() {
        return Err(Error::mismatch("latents", stats.n_latents(), a.nrows()));
    }
    if h.nrows() == 0 && a.ncols() == 0 {
        return Ok(());
    }
    let partial = batch_stats(h, a)?;
    stats.merge_from(&partial)
}

/// Scores from accumulated statistics.
pub fn finalize_scores(stats: &MonoStats, cfg: &MonoScoreConfig) -> LatentScores {
    let q = stats.w.mapv(|x| x * x).sum_axis(Axis(0));
    let (num, den): (Vec<f64>, Vec<f64>) = q
        .iter()
        .zip(&stats.u)
        .zip(&stats.v)
        .map(|((&q, &u), &v)| (0.5 * (q - v), 0.5 * (u * u - v)))
        .unzip();
    ratio_scores(&num, &den, cfg.epsilon_den)
}

/// Streams `[0, N)` in chunks of `batch_size` into fresh statistics.
/// With `extrema`, each chunk of raw activations is normalized into a
/// reused buffer first, which gives the same values as normalizing the whole
/// matrix up front without materializing it.
fn stats_over(
    h: &FeatureMatrix,
    a: &ActivationMatrix,
    extrema: Option<&Extrema>,
    range: std::ops::Range<usize>,
    batch_size: usize,
) -> Result<MonoStats> {
    let mut stats = MonoStats::zeros(h.dim(), a.n_latents());
    let mut buf = match extrema {
        Some(_) => Array2::zeros((a.n_latents(), batch_size.min(range.len()))),
        None => Array2::zeros((0, 0)),
    };
    let mut start = range.start;
    while start < range.end {
        let end = (start + batch_size).min(range.end);
        let chunk = a.samples(start..end);
        match extrema {
            Some(e) => {
                let mut dst = buf.slice_mut(s![.., ..end - start]);
                dst.assign(&chunk);
                e.scale_rows(&mut dst, true);
                accumulate_stats(&mut stats, h.rows(start..end), dst.view())?;
            }
            None => accumulate_stats(&mut stats, h.rows(start..end), chunk)?,
        }
        start = end;
    }
    Ok(stats)
}

fn extrema_if_raw(a: &ActivationMatrix) -> Option<Extrema> {
    (!a.is_normalized()).then(|| Extrema::of(a.view()))
}

/// Statistics for a whole dataset, chunked by `cfg.batch_size`.
pub fn dataset_stats(
    h: &FeatureMatrix,
    a: &ActivationMatrix,
    cfg: &MonoScoreConfig,
) -> Result<MonoStats> {
    cfg.validate()?;
    check_pair(h, a)?;
    let extrema = extrema_if_raw(a);
    stats_over(h, a, extrema.as_ref(), 0..h.n_samples(), cfg.batch_size)
}

/// Single-pass route (after the extrema pass needed for normalization).
pub fn monoscore_linear(
    h: &FeatureMatrix,
    a: &ActivationMatrix,
    cfg: &MonoScoreConfig,
) -> Result<LatentScores> {
    let stats = dataset_stats(h, a, cfg)?;
    Ok(finalize_scores(&stats, cfg))
}

/// Linear route with the samples split into contiguous shards, one per
/// worker. Shards are merged in index order, so the result is reproducible
/// for a fixed `threads`; it matches [`monoscore_linear`] up to summation
/// reassociation.
pub fn monoscore_linear_sharded(
    h: &FeatureMatrix,
    a: &ActivationMatrix,
    cfg: &MonoScoreConfig,
    threads: usize,
) -> Result<LatentScores> {
    cfg.validate()?;
    check_pair(h, a)?;
    let threads = threads.max(1);
    if threads == 1 {
        return monoscore_linear(h, a, cfg);
    }
    let extrema = extrema_if_raw(a);
    let n = h.n_samples();
    // shard edges fall on batch boundaries
    let batches = n.div_ceil(cfg.batch_size);
    let per_shard = batches.div_ceil(threads).max(1) * cfg.batch_size;
    let ranges: Vec<_> = (0..n)
        .step_by(per_shard)
        .map(|s| s..(s + per_shard).min(n))
        .collect();

    let ext = extrema.as_ref();
    let shards: Vec<Result<MonoStats>> = thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| scope.spawn(move || stats_over(h, a, ext, r, cfg.batch_size)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    });

    let mut total = MonoStats::zeros(h.dim(), a.n_latents());
    for shard in shards {
        total.merge_from(&shard?)?;
    }
    Ok(finalize_scores(&total, cfg))
}

pub fn monoscore(
    h: &FeatureMatrix,
    a: &ActivationMatrix,
    algorithm: Algorithm,
    cfg: &MonoScoreConfig,
) -> Result<LatentScores> {
    match algorithm {
        Algorithm::Pairwise => monoscore_pairwise(h, a, cfg),
        Algorithm::Linear => monoscore_linear(h, a, cfg),
    }
}

pub const SCORES_CSV_HEADER: &str = "latent_index,monoscore,active";

/// Writes one row per latent under [`SCORES_CSV_HEADER`].
pub fn write_scores_csv<W: Write>(mut out: W, scores: &LatentScores) -> std::io::Result<()> {
    writeln!(out, "{SCORES_CSV_HEADER}")?;
    for (k, (s, a)) in scores.scores.iter().zip(&scores.active).enumerate() {
        writeln!(out, "{k},{s},{a}")?;
    }
    Ok(())
}

/// JSON summary plus per-latent detail.
pub fn scores_json(
    scores: &LatentScores,
    algorithm: Algorithm,
    n_samples: usize,
    cfg: &MonoScoreConfig,
) -> serde_json::Value {
    serde_json::json!({
        "algorithm": algorithm.as_str(),
        "n_samples": n_samples,
        "n_latents": scores.len(),
        "active_count": scores.active_count(),
        "mean_monoscore_active": scores.mean_active(),
        "mean_monoscore_all": scores.mean_all(),
        "config": cfg,
        "scores": scores.scores,
        "active": scores.active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> MonoScoreConfig {
        MonoScoreConfig::default()
    }

    #[test]
    fn minmax_examples() {
        let a = ActivationMatrix::new(array![[2.0, 4.0, 6.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]])
            .unwrap();
        let n = minmax_normalize(&a);
        assert!(n.is_normalized());
        assert_eq!(n.view().row(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(n.view().row(1).to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(n.view().row(2).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn stored_extrema_clamp_or_reject() {
        let e = Extrema {
            min: vec![0.0],
            max: vec![2.0],
        };
        let fresh = array![[-1.0, 1.0, 3.0]];
        let clamped = e.normalize(fresh.view(), true).unwrap();
        assert_eq!(clamped.view().row(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert!(e.normalize(fresh.view(), false).is_err());
    }

    #[test]
    fn identical_pair_scores_one() {
        let h = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let a = ActivationMatrix::new_normalized(array![[1.0, 1.0]]).unwrap();
        for algo in [Algorithm::Pairwise, Algorithm::Linear] {
            let s = monoscore(&h, &a, algo, &cfg()).unwrap();
            assert_eq!(s.active, vec![true]);
            assert!((s.scores[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lone_activation_is_inactive() {
        let h = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let a = ActivationMatrix::new(array![[1.0, 0.0]]).unwrap();
        for algo in [Algorithm::Pairwise, Algorithm::Linear] {
            let s = monoscore(&h, &a, algo, &cfg()).unwrap();
            assert_eq!(s.scores, vec![0.0]);
            assert_eq!(s.active, vec![false]);
        }
    }

    #[test]
    fn orthogonal_embeddings_score_zero() {
        let h = FeatureMatrix::new(Array2::eye(4)).unwrap();
        let a = ActivationMatrix::new_normalized(Array2::ones((1, 4))).unwrap();
        let s = monoscore_linear(&h, &a, &cfg()).unwrap();
        assert!(s.active[0]);
        assert_eq!(s.scores[0], 0.0);
    }

    #[test]
    fn single_active_sample_per_latent() {
        let h = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]])
            .unwrap();
        let a = ActivationMatrix::new(array![[0.0, 3.0, 0.0], [0.7, 0.0, 0.0]]).unwrap();
        let s = monoscore_linear(&h, &a, &cfg()).unwrap();
        assert_eq!(s.scores, vec![0.0, 0.0]);
        assert_eq!(s.active, vec![false, false]);
    }

    #[test]
    fn accumulate_single_sample() {
        let mut stats = MonoStats::zeros(2, 1);
        let h = array![[1.0, 0.0]];
        let a = array![[0.5]];
        accumulate_stats(&mut stats, h.view(), a.view()).unwrap();
        assert_eq!(stats.u[0], 0.5);
        assert_eq!(stats.v[0], 0.25);
        assert_eq!(stats.w.column(0).to_vec(), vec![0.5, 0.0]);
        assert_eq!(stats.n_seen, 1);
    }

    #[test]
    fn accumulate_empty_batch_is_noop() {
        let mut stats = MonoStats::zeros(3, 2);
        stats.u[0] = 1.0;
        let before = stats.clone();
        let h = Array2::<f64>::zeros((0, 3));
        let a = Array2::<f64>::zeros((2, 0));
        accumulate_stats(&mut stats, h.view(), a.view()).unwrap();
        assert_eq!(stats, before);
    }

    #[test]
    fn accumulate_rejects_mismatch() {
        let mut stats = MonoStats::zeros(2, 2);
        let h = array![[1.0, 0.0]];
        let a = array![[0.5], [0.5], [0.5]];
        assert!(accumulate_stats(&mut stats, h.view(), a.view()).is_err());
        let h = FeatureMatrix::from_rows(&[vec![1.0]]).unwrap();
        let a = ActivationMatrix::new(array![[0.5, 1.0]]).unwrap();
        assert!(monoscore_linear(&h, &a, &cfg()).is_err());
        assert!(monoscore_pairwise(&h, &a, &cfg()).is_err());
    }

    #[test]
    fn finalize_degenerate_and_full() {
        let mut s = MonoStats::zeros(1, 1);
        s.u[0] = 1.0;
        s.v[0] = 1.0;
        s.w[[0, 0]] = 1.0;
        s.n_seen = 1;
        let out = finalize_scores(&s, &cfg());
        assert_eq!((out.scores[0], out.active[0]), (0.0, false));

        // two identical samples, full activation: q = 4, u = 2, v = 2
        s.u[0] = 2.0;
        s.v[0] = 2.0;
        s.w[[0, 0]] = 2.0;
        s.n_seen = 2;
        let out = finalize_scores(&s, &cfg());
        assert_eq!((out.scores[0], out.active[0]), (1.0, true));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.epsilon_den = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.pair_block = 0;
        assert!(c.validate().is_err());
        assert!("cubic".parse::<Algorithm>().is_err());
    }

    #[test]
    fn csv_has_fixed_header() {
        let s = LatentScores {
            scores: vec![0.25, 0.0],
            active: vec![true, false],
        };
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &s).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "latent_index,monoscore,active\n0,0.25,true\n1,0,false\n"
        );
    }
}
