//! Clipped, decoder-projected Adam.

use ndarray::{Array1, Array2, Axis, Zip};

use super::objective::Gradients;
use super::{Arch, SaeModel, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments, shaped like the gradients.
    pub m: Gradients,
    /// Second moments.
    pub v: Gradients,
}

fn update2(p: &mut Array2<f64>, g: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>, c: &Coeffs) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| c.apply(p, g, m, v));
}

fn update1(p: &mut Array1<f64>, g: &Array1<f64>, m: &mut Array1<f64>, v: &mut Array1<f64>, c: &Coeffs) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| c.apply(p, g, m, v));
}

struct Coeffs {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
}

impl Coeffs {
    #[inline]
    fn apply(&self, p: &mut f64, g: f64, m: &mut f64, v: &mut f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m / self.bias1;
        let v_hat = *v / self.bias2;
        *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

impl Adam {
    pub fn new(model: &SaeModel, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    /// One bias-corrected Adam update of every trainable group.
    pub fn apply(&mut self, model: &mut SaeModel, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c = Coeffs {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            bias1: 1.0 - self.beta1.powi(t),
            bias2: 1.0 - self.beta2.powi(t),
        };
        update2(&mut model.w_enc, &grads.w_enc, &mut self.m.w_enc, &mut self.v.w_enc, &c);
        update1(&mut model.b_enc, &grads.b_enc, &mut self.m.b_enc, &mut self.v.b_enc, &c);
        if !model.tied {
            update2(&mut model.w_dec, &grads.w_dec, &mut self.m.w_dec, &mut self.v.w_dec, &c);
        }
        update1(&mut model.b_dec, &grads.b_dec, &mut self.m.b_dec, &mut self.v.b_dec, &c);
        if model.arch == Arch::JumpRelu {
            update1(
                &mut model.log_thresholds,
                &grads.log_thresholds,
                &mut self.m.log_thresholds,
                &mut self.v.log_thresholds,
                &c,
            );
        }
    }

    /// Clears both moments for everything attached to latent `k`.
    pub fn reset_latent(&mut self, k: usize) {
        for g in [&mut self.m, &mut self.v] {
            g.w_enc.row_mut(k).fill(0.0);
            g.b_enc[k] = 0.0;
            g.w_dec.column_mut(k).fill(0.0);
            g.log_thresholds[k] = 0.0;
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Removes from each decoder-column gradient its component along the
/// (unit) column itself.
pub fn project_decoder_grads(grads: &mut Gradients, w_dec: &Array2<f64>) {
    for (mut g, col) in grads.w_dec.axis_iter_mut(Axis(1)).zip(w_dec.axis_iter(Axis(1))) {
        let norm2 = col.dot(&col);
        if norm2 > 0.0 {
            let along = g.dot(&col) / norm2;
            g.scaled_add(-along, &col);
        }
    }
}

/// Clip, project (untied only), Adam, then renormalize the dictionary.
pub fn optimizer_step(
    model: &mut SaeModel,
    grads: &mut Gradients,
    adam: &mut Adam,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            what: "gradients passed to optimizer".into(),
        });
    }
    clip_global_norm(grads, cfg.clip_norm);
    if !model.tied {
        project_decoder_grads(grads, &model.w_dec);
    }
    adam.apply(model, grads);
    model.normalize_decoder();
    Ok(())
}
