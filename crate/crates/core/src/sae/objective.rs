//! Forward pass, losses and the hand-derived backward pass.
//!
//! ```text
//! c  = x − b_dec                     (B x d)
//! z  = W_enc cᵀ + b_enc              (M x B)
//! a  = act(z)
//! x̂  = (W_dec a)ᵀ + b_dec            (B x d)
//! L  = mean((x̂ − x)²) + sparsity(a) + λ L_mono(x, a)
//! ```
//!
//! With layer norm, `x` is standardized per sample before encoding and `x̂`
//! is mapped back with the same mean and scale; the loss is always taken
//! against the original features.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::activation::{
    apply_batchtopk, apply_jumprelu, apply_relu, apply_topk, gate_backward,
    jumprelu_l0, jumprelu_threshold_grad,
};
use super::{Arch, SaeModel, TrainConfig, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::monoloss::{monoloss_backward, monoloss_forward};

pub struct Forward {
    pub centered: Array2<f64>,
    pub z: Array2<f64>,
    pub a: Array2<f64>,
    pub xhat: Array2<f64>,
    /// Per-sample standard deviation used by layer norm.
    pub ln_scale: Option<Array1<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub recon: f64,
    pub sparsity: f64,
    /// Unscaled `L_mono`; `None` when it was neither needed nor tracked.
    pub mono: Option<f64>,
    pub mono_active: usize,
    pub total: f64,
}

/// Gradients shaped like the model's parameters. For tied models the
/// decoder contribution is folded into `w_enc` and `w_dec` stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub log_thresholds: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &SaeModel) -> Self {
        Gradients {
            w_enc: Array2::zeros(model.w_enc.raw_dim()),
            b_enc: Array1::zeros(model.b_enc.len()),
            w_dec: Array2::zeros(model.w_dec.raw_dim()),
            b_dec: Array1::zeros(model.b_dec.len()),
            log_thresholds: Array1::zeros(model.log_thresholds.len()),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w_enc
            .iter()
            .chain(&self.b_enc)
            .chain(&self.w_dec)
            .chain(&self.b_dec)
            .chain(&self.log_thresholds)
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_enc *= factor;
        self.b_enc *= factor;
        self.w_dec *= factor;
        self.b_dec *= factor;
        self.log_thresholds *= factor;
    }
}

fn check_input(model: &SaeModel, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != model.dim() {
        return Err(Error::mismatch("SAE input dim", model.dim(), x.ncols()));
    }
    if x.nrows() == 0 {
        return Err(Error::Empty {
            rows: 0,
            cols: x.ncols(),
        });
    }
    Ok(())
}

fn activate(model: &SaeModel, z: ArrayView2<'_, f64>) -> Array2<f64> {
    match model.arch {
        Arch::TopK => apply_topk(z, model.k_active),
        Arch::BatchTopK => apply_batchtopk(z, model.k_active),
        Arch::Relu => apply_relu(z),
        Arch::JumpRelu => apply_jumprelu(z, model.log_thresholds.view()),
    }
}

/// Forward pass kept for inspection: pre-activations, codes and reconstruction.
pub fn forward(model: &SaeModel, x: ArrayView2<'_, f64>) -> Result<Forward> {
    check_input(model, x)?;
    let (input, ln) = if model.layer_norm {
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let mut xn = x.to_owned();
        let mut scale = Array1::zeros(x.nrows());
        for ((mut row, &mu), s) in xn.axis_iter_mut(Axis(0)).zip(&mean).zip(scale.iter_mut()) {
            row.mapv_inplace(|v| v - mu);
            let var = row.dot(&row) / row.len() as f64;
            *s = (var + LAYER_NORM_EPS).sqrt();
            let sd = *s;
            row.mapv_inplace(|v| v / sd);
        }
        (xn, Some((mean, scale)))
    } else {
        (x.to_owned(), None)
    };

    let centered = &input - &model.b_dec;
    let z = model.w_enc.dot(&centered.t()) + &model.b_enc.view().insert_axis(Axis(1));
    let a = activate(model, z.view());
    let mut xhat = a.t().dot(&model.w_dec.t()) + &model.b_dec;
    let ln_scale = ln.map(|(mean, scale)| {
        for ((mut row, &mu), &s) in xhat.axis_iter_mut(Axis(0)).zip(&mean).zip(&scale) {
            row.mapv_inplace(|v| v * s + mu);
        }
        scale
    });
    Ok(Forward {
        centered,
        z,
        a,
        xhat,
        ln_scale,
    })
}

fn sparsity_value(model: &SaeModel, fwd: &Forward, cfg: &TrainConfig) -> f64 {
    let b = fwd.a.ncols() as f64;
    match model.arch {
        Arch::Relu => cfg.l1_coeff * fwd.a.iter().map(|x| x.abs()).sum::<f64>() / b,
        Arch::JumpRelu => {
            cfg.jump_sparsity_coeff * jumprelu_l0(fwd.z.view(), model.log_thresholds.view()) / b
        }
        Arch::TopK | Arch::BatchTopK => 0.0,
    }
}

fn ensure_finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            what: format!("{term} loss ({value})"),
        })
    }
}

fn assemble(recon: f64, sparsity: f64, mono: Option<f64>, mono_active: usize, cfg: &TrainConfig) -> Result<Losses> {
    let recon = ensure_finite(recon, "reconstruction")?;
    let sparsity = ensure_finite(sparsity, "sparsity")?;
    if let Some(m) = mono {
        ensure_finite(m, "mono")?;
    }
    let base = recon + sparsity;
    let total = match mono {
        Some(m) => crate::monoloss::total_loss(base, m, &cfg.mono_config()),
        None => base,
    };
    Ok(Losses {
        recon,
        sparsity,
        mono,
        mono_active,
        total,
    })
}

fn recon_loss(x: ArrayView2<'_, f64>, xhat: &Array2<f64>) -> f64 {
    let diff = xhat - &x;
    diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64
}

/// Reconstruction, sparsity and MonoLoss terms on one batch.
pub fn sae_loss(model: &SaeModel, x: ArrayView2<'_, f64>, cfg: &TrainConfig) -> Result<Losses> {
    let fwd = forward(model, x)?;
    let recon = recon_loss(x, &fwd.xhat);
    let sparsity = sparsity_value(model, &fwd, cfg);
    let (mono, active) = if cfg.lambda_mono > 0.0 || cfg.track_mono {
        let v = monoloss_forward(x, fwd.a.view(), &cfg.mono_config())?;
        (Some(v.loss), v.active_count)
    } else {
        (None, 0)
    };
    assemble(recon, sparsity, mono, active, cfg)
}

/// Losses plus gradients for every parameter group.
pub fn sae_loss_and_grad(
    model: &SaeModel,
    x: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<(Losses, Gradients, Array2<f64>)> {
    let (losses, grads, fwd) = loss_and_grad_impl(model, x, cfg)?;
    Ok((losses, grads, fwd.a))
}

pub(crate) fn loss_and_grad_impl(
    model: &SaeModel,
    x: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<(Losses, Gradients, Forward)> {
    let fwd = forward(model, x)?;
    let (b, d) = x.dim();
    let recon = recon_loss(x, &fwd.xhat);
    let sparsity = sparsity_value(model, &fwd, cfg);

    // d recon / d x̂, then back through the layer-norm output map
    let mut dy = (&fwd.xhat - &x) * (2.0 / (b * d) as f64);
    if let Some(scale) = &fwd.ln_scale {
        for (mut row, &s) in dy.axis_iter_mut(Axis(0)).zip(scale) {
            row *= s;
        }
    }

    let mut grads = Gradients::zeros_like(model);
    let dw_dec = dy.t().dot(&fwd.a.t());
    grads.b_dec = dy.sum_axis(Axis(0));
    let mut da = model.w_dec.t().dot(&dy.t());

    if model.arch == Arch::Relu && cfg.l1_coeff > 0.0 {
        let c = cfg.l1_coeff / b as f64;
        ndarray::Zip::from(&mut da).and(&fwd.a).for_each(|g, &a| {
            if a > 0.0 {
                *g += c;
            }
        });
    }

    let (mono, mono_active) = if cfg.lambda_mono > 0.0 {
        let out = monoloss_backward(x, fwd.a.view(), &cfg.mono_config())?;
        da.scaled_add(cfg.lambda_mono, &out.grad_activations);
        (Some(out.loss), out.active_count)
    } else if cfg.track_mono {
        let v = monoloss_forward(x, fwd.a.view(), &cfg.mono_config())?;
        (Some(v.loss), v.active_count)
    } else {
        (None, 0)
    };

    if model.arch == Arch::JumpRelu {
        grads.log_thresholds = jumprelu_threshold_grad(
            fwd.z.view(),
            model.log_thresholds.view(),
            model.bandwidth,
            da.view(),
            cfg.jump_sparsity_coeff / b as f64,
        );
    }

    let dz = gate_backward(da.view(), fwd.a.view());
    grads.w_enc = dz.dot(&fwd.centered);
    grads.b_enc = dz.sum_axis(Axis(1));
    let dc = dz.t().dot(&model.w_enc);
    grads.b_dec -= &dc.sum_axis(Axis(0));

    if model.tied {
        grads.w_enc += &dw_dec.t();
    } else {
        grads.w_dec = dw_dec;
    }

    let losses = assemble(recon, sparsity, mono, mono_active, cfg)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            what: "SAE gradients".into(),
        });
    }
    Ok((losses, grads, fwd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(arch: Arch) -> (SaeModel, TrainConfig) {
        let mut cfg = TrainConfig::desk(arch);
        cfg.n_latents = 6;
        cfg.k_active = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (SaeModel::init(&cfg, 4, &mut rng).unwrap(), cfg)
    }

    #[test]
    fn perfect_autoencoder_has_zero_recon() {
        let (mut m, mut cfg) = tiny(Arch::Relu);
        cfg.l1_coeff = 0.0;
        cfg.track_mono = false;
        // identity on the positive orthant: W_enc = [I; 0], W_dec = [I 0]
        m.w_enc.fill(0.0);
        m.w_dec.fill(0.0);
        for i in 0..4 {
            m.w_enc[[i, i]] = 1.0;
            m.w_dec[[i, i]] = 1.0;
        }
        let x = ndarray::array![[0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0]];
        let l = sae_loss(&m, x.view(), &cfg).unwrap();
        assert_eq!(l.recon, 0.0);
        assert_eq!(l.total, l.sparsity);
    }

    #[test]
    fn zero_lambda_total_is_base() {
        let (m, cfg) = tiny(Arch::JumpRelu);
        assert_eq!(cfg.lambda_mono, 0.0);
        let x = ndarray::array![[0.5, 0.5, 0.5, 0.5], [0.0, 0.6, 0.8, 0.0]];
        let l = sae_loss(&m, x.view(), &cfg).unwrap();
        assert!(l.mono.is_some());
        assert_eq!(l.total, l.recon + l.sparsity);
    }

    #[test]
    fn relu_with_no_activity_has_zero_sparsity() {
        let (mut m, cfg) = tiny(Arch::Relu);
        m.w_enc.fill(0.0);
        let x = ndarray::array![[0.5, 0.5, 0.5, 0.5]];
        assert_eq!(sae_loss(&m, x.view(), &cfg).unwrap().sparsity, 0.0);
    }

    #[test]
    fn nan_input_is_reported() {
        let (m, cfg) = tiny(Arch::TopK);
        let x = ndarray::array![[f64::NAN, 0.5, 0.5, 0.5]];
        let err = sae_loss_and_grad(&m, x.view(), &cfg).unwrap_err();
        assert!(err.is_numerical() || matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn tied_gradient_leaves_decoder_group_empty() {
        let (m, cfg) = tiny(Arch::TopK);
        assert!(m.tied);
        let x = ndarray::array![[0.5, 0.5, 0.5, 0.5], [0.0, 0.6, 0.8, 0.0]];
        let (_, g, _) = sae_loss_and_grad(&m, x.view(), &cfg).unwrap();
        assert!(g.w_dec.iter().all(|&v| v == 0.0));
        assert!(g.w_enc.iter().any(|&v| v != 0.0));
    }
}
