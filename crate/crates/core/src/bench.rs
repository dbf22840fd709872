//! Wall-clock scaling of pairwise versus single-pass MonoScore.
//!
//! Each (algorithm, N) cell runs once as a discarded warm-up, then
//! `repetitions` timed samples; the median is reported. Fast cells repeat
//! the call inside a sample until it spans `min_sample_seconds`, and report
//! the per-call time.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::monoscore::{monoscore_linear, monoscore_linear_sharded, monoscore_pairwise, MonoScoreConfig};
use crate::sae::{train, TrainConfig};
use crate::types::{ActivationMatrix, FeatureMatrix};

pub const MIN_REPETITIONS: usize = 3;
pub const BENCH_CSV_HEADER: &str = "algorithm,n,repetitions,median_seconds,speedup,status";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    /// Strictly increasing powers of two.
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub latents: usize,
    pub repetitions: usize,
    /// Pairwise runs are skipped for N above this.
    pub pairwise_cutoff: usize,
    /// Above 1, an extra sharded linear run is timed and reported separately.
    pub threads: usize,
    pub seed: u64,
    pub min_sample_seconds: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: (8..=14).map(|p| 1 << p).collect(),
            dim: 64,
            latents: 256,
            repetitions: MIN_REPETITIONS,
            pairwise_cutoff: 1 << 14,
            threads: 1,
            seed: 0,
            min_sample_seconds: 0.25,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::InvalidConfig("benchmark needs at least one size".into()));
        }
        if let Some(&bad) = self.sizes.iter().find(|n| !n.is_power_of_two() || **n < 2) {
            return Err(Error::InvalidConfig(format!("size {bad} is not a power of two >= 2")));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("sizes must be strictly increasing".into()));
        }
        if self.repetitions < MIN_REPETITIONS {
            return Err(Error::InvalidConfig(format!(
                "repetitions must be at least {MIN_REPETITIONS}"
            )));
        }
        if !(self.min_sample_seconds >= 0.0) {
            return Err(Error::InvalidConfig("min_sample_seconds must be >= 0".into()));
        }
        if self.dim == 0 || self.latents == 0 {
            return Err(Error::InvalidConfig("dim and latents must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `2^8..2^14`, `256..16384` or a comma list such as `256,1024`.
pub fn parse_sizes(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidConfig(format!("invalid size list {spec:?}"));
    let one = |s: &str| -> Result<usize> {
        let s = s.trim();
        match s.strip_prefix("2^") {
            Some(p) => {
                let p: u32 = p.parse().map_err(|_| bad())?;
                1usize.checked_shl(p).filter(|_| p < usize::BITS).ok_or_else(bad)
            }
            None => s.parse().map_err(|_| bad()),
        }
    };
    let sizes = if let Some((lo, hi)) = spec.split_once("..") {
        let (lo, hi) = (one(lo)?, one(hi)?);
        if !lo.is_power_of_two() || !hi.is_power_of_two() || lo > hi {
            return Err(bad());
        }
        std::iter::successors(Some(lo), |&n| (n < hi).then_some(n * 2)).collect()
    } else {
        spec.split(',').map(one).collect::<Result<Vec<_>>>()?
    };
    Ok(sizes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub algorithm: String,
    pub n: usize,
    pub repetitions: usize,
    pub median_seconds: Option<f64>,
    /// Pairwise median over this median at the same N.
    pub speedup: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slope {
    pub algorithm: String,
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<Slope>,
}

impl BenchResult {
    pub fn slope(&self, algorithm: &str) -> Option<f64> {
        self.slopes.iter().find(|s| s.algorithm == algorithm)?.slope
    }

    pub fn row(&self, algorithm: &str, n: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.algorithm == algorithm && r.n == n)
    }
}

/// Unit Gaussian features and ReLU-thresholded Gaussian activations.
pub fn bench_inputs(n: usize, dim: usize, latents: usize, seed: u64) -> Result<(FeatureMatrix, ActivationMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    let a = Array2::from_shape_simple_fn((latents, n), || (rng.sample::<f64, _>(StandardNormal) - 0.5).max(0.0));
    Ok((FeatureMatrix::new(h)?, ActivationMatrix::new(a)?))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median per-call seconds over `reps` samples, after one discarded call
/// that also sizes the inner loop.
pub fn time_median<F: FnMut() -> Result<()>>(reps: usize, min_sample_seconds: f64, mut f: F) -> Result<f64> {
    let t = Instant::now();
    f()?;
    let warm = t.elapsed().as_secs_f64();
    let inner = if warm > 0.0 {
        (min_sample_seconds / warm).ceil().clamp(1.0, 1e6) as usize
    } else {
        1000
    };
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        times.push(t.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(median(&mut times))
}

/// Least-squares slope of `log2(y)` against `log2(x)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.log2(), y.log2()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let score_cfg = MonoScoreConfig::default();
    let mut rows = Vec::new();
    let mut algorithms = vec!["pairwise", "linear"];
    if cfg.threads > 1 {
        algorithms.push("linear_sharded");
    }

    for &n in &cfg.sizes {
        let (h, a) = bench_inputs(n, cfg.dim, cfg.latents, cfg.seed ^ n as u64)?;
        let pairwise = if n <= cfg.pairwise_cutoff {
            Some(time_median(cfg.repetitions, cfg.min_sample_seconds, || monoscore_pairwise(&h, &a, &score_cfg).map(drop))?)
        } else {
            None
        };
        let linear = time_median(cfg.repetitions, cfg.min_sample_seconds, || monoscore_linear(&h, &a, &score_cfg).map(drop))?;
        let sharded = if cfg.threads > 1 {
            Some(time_median(cfg.repetitions, cfg.min_sample_seconds, || {
                monoscore_linear_sharded(&h, &a, &score_cfg, cfg.threads).map(drop)
            })?)
        } else {
            None
        };
        for alg in &algorithms {
            let t = match *alg {
                "pairwise" => pairwise,
                "linear" => Some(linear),
                _ => sharded,
            };
            let speedup = match (pairwise, t) {
                (Some(p), Some(t)) => Some(p / t),
                _ => None,
            };
            log::info!("bench {alg} N={n}: {t:?} s");
            rows.push(BenchRow {
                algorithm: alg.to_string(),
                n,
                repetitions: cfg.repetitions,
                median_seconds: t,
                speedup,
                status: if t.is_some() { "ok" } else { "skipped" }.into(),
            });
        }
    }

    let slopes = algorithms
        .iter()
        .map(|alg| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.algorithm == *alg)
                .filter_map(|r| r.median_seconds.map(|t| (r.n as f64, t)))
                .collect();
            Slope {
                algorithm: alg.to_string(),
                slope: loglog_slope(&pts),
            }
        })
        .collect();
    Ok(BenchResult {
        config: cfg.clone(),
        rows,
        slopes,
    })
}

pub fn write_bench_csv<W: Write>(mut out: W, result: &BenchResult) -> std::io::Result<()> {
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for r in &result.rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.algorithm,
            r.n,
            r.repetitions,
            opt(r.median_seconds),
            opt(r.speedup),
            r.status
        )?;
    }
    Ok(())
}

/// Log-log plot of median time against N, one polyline per algorithm.
pub fn bench_svg(result: &BenchResult) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 60.0;
    const COLORS: [&str; 3] = ["#c0392b", "#2471a3", "#229954"];

    let pts: Vec<(f64, f64)> = result
        .rows
        .iter()
        .filter_map(|r| r.median_seconds.filter(|t| *t > 0.0).map(|t| ((r.n as f64).log2(), t.log2())))
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(1e-9) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0).max(1e-9) * (H - 2.0 * PAD);

    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">log2 N</text>"#,
        W / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" font-size="13" transform="rotate(-90 18 {})" text-anchor="middle">log2 seconds</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, s) in result.slopes.iter().enumerate() {
        let line: Vec<String> = result
            .rows
            .iter()
            .filter(|r| r.algorithm == s.algorithm)
            .filter_map(|r| r.median_seconds.filter(|t| *t > 0.0).map(|t| (r.n as f64, t)))
            .map(|(n, t)| format!("{:.1},{:.1}", sx(n.log2()), sy(t.log2())))
            .collect();
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            line.join(" ")
        );
        let label = match s.slope {
            Some(v) => format!("{} (slope {:.2})", s.algorithm, v),
            None => s.algorithm.clone(),
        };
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}" font-size="13">{label}</text>"#,
            PAD + 10.0,
            PAD + 18.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingOverhead {
    pub base_seconds: f64,
    pub mono_seconds: f64,
    /// `mono_seconds / base_seconds − 1`.
    pub overhead: f64,
}

/// Times training with and without the MonoLoss term on the same data.
pub fn training_overhead(features: &FeatureMatrix, cfg: &TrainConfig, lambda: f64) -> Result<TrainingOverhead> {
    let mut base = cfg.clone();
    base.lambda_mono = 0.0;
    base.track_mono = false;
    let mut mono = cfg.clone();
    mono.lambda_mono = lambda;
    let run = |c: &TrainConfig| -> Result<f64> {
        let t = Instant::now();
        train(features, c).map_err(|f| f.error)?;
        Ok(t.elapsed().as_secs_f64())
    };
    let base_seconds = run(&base)?;
    let mono_seconds = run(&mono)?;
    Ok(TrainingOverhead {
        base_seconds,
        mono_seconds,
        overhead: mono_seconds / base_seconds - 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_sizes("2^8..2^10").unwrap(), vec![256, 512, 1024]);
        assert_eq!(parse_sizes("4,8").unwrap(), vec![4, 8]);
        assert_eq!(parse_sizes("16..64").unwrap(), vec![16, 32, 64]);
        assert!(parse_sizes("2^x").is_err());
        assert!(parse_sizes("2^10..2^8").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = BenchConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.sizes = vec![512, 256];
        assert!(cfg.validate().is_err());
        cfg.sizes = vec![300];
        assert!(cfg.validate().is_err());
        cfg.sizes = vec![256];
        cfg.repetitions = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = (4..9).map(|p| {
            let n = (1u64 << p) as f64;
            (n, 3.0 * n * n)
        }).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_run_has_consistent_rows() {
        let cfg = BenchConfig {
            sizes: vec![16, 32, 64],
            dim: 4,
            latents: 3,
            pairwise_cutoff: 32,
            threads: 2,
            min_sample_seconds: 0.0,
            ..Default::default()
        };
        let r = run_bench(&cfg).unwrap();
        assert_eq!(r.rows.len(), 9);
        let p = r.row("pairwise", 64).unwrap();
        assert_eq!(p.status, "skipped");
        assert!(p.median_seconds.is_none());
        assert!(r.row("linear", 64).unwrap().speedup.is_none());
        let (p, l) = (r.row("pairwise", 32).unwrap(), r.row("linear", 32).unwrap());
        assert_eq!(l.speedup.unwrap(), p.median_seconds.unwrap() / l.median_seconds.unwrap());

        let mut csv = Vec::new();
        write_bench_csv(&mut csv, &r).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(BENCH_CSV_HEADER));
        assert!(text.contains(",skipped"));
        assert!(bench_svg(&r).contains("<polyline"));
    }
}
