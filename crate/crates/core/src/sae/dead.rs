//! Dead-latent bookkeeping and reinitialization for TopK models.

use ndarray::{Array2, ArrayView2, Axis};

use super::optim::Adam;
use super::SaeModel;

/// Resets the counter of every latent that fired in `a` (`M x B`) and adds
/// the batch size to the others.
pub fn update_dead_counters(model: &mut SaeModel, a: ArrayView2<'_, f64>) {
    let b = a.ncols() as u64;
    for (counter, row) in model.dead_steps.iter_mut().zip(a.axis_iter(Axis(0))) {
        if row.iter().any(|&x| x > 0.0) {
            *counter = 0;
        } else {
            *counter += b;
        }
    }
}

/// Reinitializes latents whose counter exceeds `threshold_examples`.
///
/// Each dead latent gets the unit residual `x − x̂` of one batch sample, taken
/// in order of decreasing reconstruction error, as both its encoder row and
/// its decoder column. Its encoder bias, Adam moments and counter are reset.
/// Returns the reinitialized latent indices.
pub fn handle_dead_latents(
    model: &mut SaeModel,
    adam: &mut Adam,
    threshold_examples: u64,
    x: ArrayView2<'_, f64>,
    xhat: &Array2<f64>,
) -> Vec<usize> {
    let dead: Vec<usize> = model
        .dead_steps
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > threshold_examples)
        .map(|(k, _)| k)
        .collect();
    if dead.is_empty() {
        return dead;
    }

    let residual = &x - xhat;
    let errors: Vec<f64> = residual.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut order: Vec<usize> = (0..errors.len()).filter(|&i| errors[i] > 1e-24).collect();
    order.sort_by(|&i, &j| errors[j].total_cmp(&errors[i]).then(i.cmp(&j)));
    if order.is_empty() {
        return Vec::new();
    }

    for (slot, &k) in dead.iter().enumerate() {
        let s = order[slot % order.len()];
        let dir = residual.row(s).mapv(|v| v / errors[s].sqrt());
        model.w_enc.row_mut(k).assign(&dir);
        if !model.tied {
            model.w_dec.column_mut(k).assign(&dir);
        }
        model.b_enc[k] = 0.0;
        adam.reset_latent(k);
        model.dead_steps[k] = 0;
    }
    model.sync_tied();
    dead
}
