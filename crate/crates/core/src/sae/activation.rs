//! Sparsifying nonlinearities. All take latent-major `M x B` pre-activations.
//!
//! For every architecture the gradient with respect to `z` passes exactly
//! where the output is positive, so the backward mask is just `a > 0`.
//! JumpReLU additionally gets a straight-through gradient for its thresholds.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Larger value first, then lower index.
fn rank(values: &[f64], i: usize, j: usize) -> Ordering {
    values[j].total_cmp(&values[i]).then(i.cmp(&j))
}

/// Indices of the `k` entries that sort first under [`rank`].
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, |&i, &j| rank(values, i, j));
        idx.truncate(k);
    }
    idx
}

pub fn apply_relu(z: ArrayView2<'_, f64>) -> Array2<f64> {
    z.mapv(relu)
}

/// Keeps the `k` largest `ReLU(z)` entries of every column.
///
/// Ties go to the lower latent index.
pub fn apply_topk(z: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    let (m, b) = z.dim();
    let mut out = Array2::zeros((m, b));
    let k = k.min(m);
    let mut col = vec![0.0; m];
    for n in 0..b {
        for (c, &x) in col.iter_mut().zip(z.column(n)) {
            *c = relu(x);
        }
        for i in top_indices(&col, k) {
            out[[i, n]] = col[i];
        }
    }
    out
}

/// Keeps the `k · B` largest `ReLU(z)` entries of the whole batch.
///
/// Ties go to the lower `(latent, sample)` index.
pub fn apply_batchtopk(z: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    let (m, b) = z.dim();
    let flat: Vec<f64> = z.iter().map(|&x| relu(x)).collect();
    let keep = (k * b).min(m * b);
    let mut out = Array2::zeros((m, b));
    for i in top_indices(&flat, keep) {
        out[[i / b, i % b]] = flat[i];
    }
    out
}

/// `ReLU(z) · 1[ReLU(z) > τ_k]` with `τ = exp(log_thresholds)`.
pub fn apply_jumprelu(z: ArrayView2<'_, f64>, log_thresholds: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = z.mapv(relu);
    for (mut row, &l) in out.axis_iter_mut(Axis(0)).zip(log_thresholds) {
        let tau = l.exp();
        row.mapv_inplace(|x| if x > tau { x } else { 0.0 });
    }
    out
}

/// Rectangle kernel of unit width: `1[|u| < ½]`.
pub fn rectangle(u: f64) -> f64 {
    if u > -0.5 && u < 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Gradient with respect to `z` given the upstream gradient `da` and the
/// forward output `a`.
pub fn gate_backward(da: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dz = da.to_owned();
    Zip::from(&mut dz).and(a).for_each(|g, &x| {
        if x <= 0.0 {
            *g = 0.0;
        }
    });
    dz
}

/// Straight-through gradient for the JumpReLU log-thresholds.
///
/// Both the activation `ReLU(z)·H(ReLU(z) − τ)` and the gate count
/// `H(ReLU(z) − τ)` use the rectangle pseudo-derivative of width
/// `bandwidth` around `τ`:
///
/// ```text
/// ∂a/∂τ ≈ −(τ / bw) · rect((ReLU(z) − τ) / bw)
/// ∂H/∂τ ≈ −(1 / bw) · rect((ReLU(z) − τ) / bw)
/// ```
///
/// `da` is the upstream gradient on the activations and `gate_weight` the
/// coefficient of each gate in the loss. Returns `∂L/∂ℓ = τ ∂L/∂τ`.
pub fn jumprelu_threshold_grad(
    z: ArrayView2<'_, f64>,
    log_thresholds: ArrayView1<'_, f64>,
    bandwidth: f64,
    da: ArrayView2<'_, f64>,
    gate_weight: f64,
) -> Array1<f64> {
    let mut grad = Array1::zeros(log_thresholds.len());
    for (k, (&l, g)) in log_thresholds.iter().zip(grad.iter_mut()).enumerate() {
        let tau = l.exp();
        let mut dtau = 0.0;
        for (&zk, &dak) in z.row(k).iter().zip(da.row(k)) {
            let r = rectangle((relu(zk) - tau) / bandwidth);
            if r != 0.0 {
                dtau -= (dak * tau + gate_weight) * r / bandwidth;
            }
        }
        *g = tau * dtau;
    }
    grad
}

/// Number of open JumpReLU gates (the exact L0 count).
pub fn jumprelu_l0(z: ArrayView2<'_, f64>, log_thresholds: ArrayView1<'_, f64>) -> f64 {
    let mut count = 0usize;
    for (row, &l) in z.axis_iter(Axis(0)).zip(log_thresholds) {
        let tau = l.exp();
        count += row.iter().filter(|&&x| relu(x) > tau).count();
    }
    count as f64
}
