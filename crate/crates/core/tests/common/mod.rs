//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use monosema::monoloss::{monoloss_backward, monoloss_forward, MonoLossConfig};
use monosema::sae::{sae_loss, sae_loss_and_grad, Arch, SaeModel, TrainConfig};
use monosema::types::{ActivationMatrix, FeatureMatrix};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;
pub const FD_GRAD_FLOOR: f64 = 1e-8;
pub const BOUNDARY_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_features<R: Rng>(rng: &mut R, n: usize, d: usize) -> FeatureMatrix {
    FeatureMatrix::new(Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)))
        .expect("random rows are non-zero")
}

/// Non-negative activations where roughly `density` of the entries fire.
pub fn random_activations<R: Rng>(rng: &mut R, m: usize, n: usize, density: f64) -> ActivationMatrix {
    let a = Array2::from_shape_fn((m, n), |_| {
        if rng.random_bool(density) {
            rng.random_range(0.0..3.0)
        } else {
            0.0
        }
    });
    ActivationMatrix::new(a).expect("finite")
}

/// Relative error as `|a − b| / max(|a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Smallest gradient whose central difference can be judged at `FD_TOL`.
///
/// Each loss evaluation carries a rounding error of about one ulp of `f`,
/// so the difference quotient is uncertain by `ulp(f) / h`. Below
/// `ulp(f) / (h · FD_TOL)` a disagreement says nothing about the analytic
/// gradient.
pub fn fd_resolution(f: f64) -> f64 {
    let ulp = f64::EPSILON * f.abs().max(f64::MIN_POSITIVE);
    ulp / (FD_STEP * FD_TOL)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates above `FD_GRAD_FLOOR` but below the difference
    /// quotient's resolution.
    pub unresolved: usize,
}

impl FdReport {
    fn record(&mut self, analytic: f64, numeric: f64, resolution: f64) {
        let mag = analytic.abs().max(numeric.abs());
        if mag <= FD_GRAD_FLOOR {
            return;
        }
        if mag < resolution {
            self.unresolved += 1;
            return;
        }
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.checked += 1;
    }

    pub fn merge(&mut self, other: FdReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.unresolved += other.unresolved;
    }
}

/// MonoLoss gradient with respect to raw activations on one random batch.
pub fn monoloss_fd(seed: u64, b: usize, m: usize, d: usize) -> FdReport {
    let mut r = rng(seed);
    let h = random_features(&mut r, b, d);
    let a = Array2::from_shape_fn((m, b), |_| r.random_range(0.0..2.0));
    let cfg = MonoLossConfig::default();
    let out = monoloss_backward(h.view(), a.view(), &cfg).unwrap();
    let res = fd_resolution(out.loss);
    let mut report = FdReport::default();
    for k in 0..m {
        for n in 0..b {
            let mut p = a.clone();
            p[[k, n]] += FD_STEP;
            let mut q = a.clone();
            q[[k, n]] -= FD_STEP;
            let fp = monoloss_forward(h.view(), p.view(), &cfg).unwrap().loss;
            let fq = monoloss_forward(h.view(), q.view(), &cfg).unwrap().loss;
            report.record(out.grad_activations[[k, n]], (fp - fq) / (2.0 * FD_STEP), res);
        }
    }
    report
}

pub fn tiny_config(arch: Arch) -> TrainConfig {
    let mut cfg = TrainConfig::desk(arch);
    cfg.n_latents = 10;
    cfg.k_active = 3;
    cfg.l1_coeff = 0.02;
    cfg.jump_sparsity_coeff = 0.01;
    cfg.lambda_mono = 0.1;
    cfg
}

fn pre_activations(model: &SaeModel, x: &Array2<f64>) -> Array2<f64> {
    let centered = x - &model.b_dec;
    let mut z = model.w_enc.dot(&centered.t());
    for mut col in z.axis_iter_mut(Axis(1)) {
        col += &model.b_enc;
    }
    z
}

fn sorted_desc(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut s: Vec<f64> = v.collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// True when every nonlinearity decision of `model` on `x` is at least
/// `BOUNDARY_MARGIN` away from flipping, and the positive activations of each
/// latent are pairwise separated (so batch extrema cannot swap).
pub fn far_from_boundaries(model: &SaeModel, x: &Array2<f64>) -> bool {
    let z = pre_activations(model, x);
    if z.iter().any(|v| v.abs() < BOUNDARY_MARGIN) {
        return false;
    }
    let relu = z.mapv(|v| v.max(0.0));
    let k = model.k_active;
    let gap_ok = |s: &[f64], keep: usize| keep >= s.len() || s[keep - 1] - s[keep] >= BOUNDARY_MARGIN;
    match model.arch {
        Arch::TopK => {
            for col in relu.axis_iter(Axis(1)) {
                if !gap_ok(&sorted_desc(col.iter().copied()), k) {
                    return false;
                }
            }
        }
        Arch::BatchTopK => {
            if !gap_ok(&sorted_desc(relu.iter().copied()), k * x.nrows()) {
                return false;
            }
        }
        Arch::JumpRelu => {
            let tau = model.thresholds();
            for (row, &t) in z.axis_iter(Axis(0)).zip(&tau) {
                if row.iter().any(|v| (v - t).abs() < BOUNDARY_MARGIN) {
                    return false;
                }
            }
        }
        Arch::Relu => {}
    }
    let a = model.encode(x.view()).unwrap();
    for row in a.axis_iter(Axis(0)) {
        let pos = sorted_desc(row.iter().copied().filter(|v| *v > 0.0));
        if pos.windows(2).any(|w| w[0] - w[1] < BOUNDARY_MARGIN) {
            return false;
        }
    }
    true
}

/// A tiny model (d = 6, M = 10) and batch (B = 8) with random parameters,
/// resampled until the probe point is far from every decision boundary.
pub fn tiny_probe(arch: Arch, seed: u64) -> (SaeModel, TrainConfig, Array2<f64>) {
    let cfg = tiny_config(arch);
    for attempt in 0..10_000u64 {
        let mut r = rng(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let mut model = SaeModel::init(&cfg, 6, &mut r).unwrap();
        model.b_enc = Array1::from_shape_fn(10, |_| r.random_range(-0.2..0.2));
        model.b_dec = Array1::from_shape_fn(6, |_| r.random_range(-0.1..0.1));
        if arch == Arch::JumpRelu {
            model.log_thresholds = Array1::from_shape_fn(10, |_| r.random_range(-4.0..-1.5));
        }
        let x = random_features(&mut r, 8, 6).into_inner();
        if far_from_boundaries(&model, &x) {
            return (model, cfg, x);
        }
    }
    panic!("no probe point found for {arch}");
}

fn perturbed(model: &SaeModel, f: impl FnOnce(&mut SaeModel)) -> SaeModel {
    let mut m = model.clone();
    f(&mut m);
    m.sync_tied();
    m
}

/// Central differences of the full objective for every non-threshold
/// parameter. Threshold gradients use a pseudo-derivative by design and are
/// checked separately.
pub fn sae_fd(arch: Arch, seed: u64) -> FdReport {
    let (model, cfg, x) = tiny_probe(arch, seed);
    let (losses, grads, _) = sae_loss_and_grad(&model, x.view(), &cfg).unwrap();
    let res = fd_resolution(losses.total);
    let loss = |m: &SaeModel| sae_loss(m, x.view(), &cfg).unwrap().total;
    let mut report = FdReport::default();

    let (rows, cols) = model.w_enc.dim();
    for i in 0..rows {
        for j in 0..cols {
            let p = perturbed(&model, |m| m.w_enc[[i, j]] += FD_STEP);
            let q = perturbed(&model, |m| m.w_enc[[i, j]] -= FD_STEP);
            report.record(grads.w_enc[[i, j]], (loss(&p) - loss(&q)) / (2.0 * FD_STEP), res);
        }
    }
    if !model.tied {
        let (rows, cols) = model.w_dec.dim();
        for i in 0..rows {
            for j in 0..cols {
                let p = perturbed(&model, |m| m.w_dec[[i, j]] += FD_STEP);
                let q = perturbed(&model, |m| m.w_dec[[i, j]] -= FD_STEP);
                report.record(grads.w_dec[[i, j]], (loss(&p) - loss(&q)) / (2.0 * FD_STEP), res);
            }
        }
    }
    for i in 0..model.b_enc.len() {
        let p = perturbed(&model, |m| m.b_enc[i] += FD_STEP);
        let q = perturbed(&model, |m| m.b_enc[i] -= FD_STEP);
        report.record(grads.b_enc[i], (loss(&p) - loss(&q)) / (2.0 * FD_STEP), res);
    }
    for i in 0..model.b_dec.len() {
        let p = perturbed(&model, |m| m.b_dec[i] += FD_STEP);
        let q = perturbed(&model, |m| m.b_dec[i] -= FD_STEP);
        report.record(grads.b_dec[i], (loss(&p) - loss(&q)) / (2.0 * FD_STEP), res);
    }
    report
}

/// Straightforward recount of binary purity per latent.
pub fn brute_binary_purity(a: &Array2<f64>, labels: &[usize]) -> Vec<Option<f64>> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for k in 0..a.nrows() {
        let mut counts = vec![0usize; n_classes];
        let mut total = 0usize;
        for n in 0..a.ncols() {
            if a[[k, n]] > 0.0 {
                counts[labels[n]] += 1;
                total += 1;
            }
        }
        if total == 0 {
            out.push(None);
            continue;
        }
        let mut best = 0;
        for c in 0..n_classes {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        out.push(Some(counts[best] as f64 / total as f64));
    }
    out
}
