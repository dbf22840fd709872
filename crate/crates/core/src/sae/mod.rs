//! Sparse autoencoders over frozen feature vectors.
//!
//! All four architectures share `z = W_enc (x − b_dec) + b_enc` and
//! `x̂ = W_dec a + b_dec`; they differ only in the nonlinearity that maps
//! `z` to the sparse code `a` and in the sparsity penalty.

pub mod activation;
pub mod checkpoint;
pub mod dead;
pub mod objective;
pub mod optim;
pub mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ActivationMatrix, FeatureMatrix};

pub use activation::{apply_batchtopk, apply_jumprelu, apply_relu, apply_topk};
pub use objective::{sae_loss, sae_loss_and_grad, Gradients, Losses};
pub use optim::{optimizer_step, Adam};
pub use train::{train, EpochLog, TrainFailure, TrainReport};

/// JumpReLU thresholds start at `τ = 0.001`.
pub const INITIAL_LOG_THRESHOLD: f64 = -6.907_755_278_982_137;

/// Added to the per-sample standard deviation when layer norm is enabled.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    TopK,
    BatchTopK,
    Relu,
    JumpRelu,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::TopK, Arch::BatchTopK, Arch::Relu, Arch::JumpRelu];

    pub fn id(self) -> u8 {
        match self {
            Arch::TopK => 0,
            Arch::BatchTopK => 1,
            Arch::Relu => 2,
            Arch::JumpRelu => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Arch> {
        Arch::ALL.into_iter().find(|a| a.id() == id)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::TopK => "topk",
            Arch::BatchTopK => "batchtopk",
            Arch::Relu => "relu",
            Arch::JumpRelu => "jumprelu",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "topk" => Ok(Arch::TopK),
            "batchtopk" => Ok(Arch::BatchTopK),
            "relu" | "vanilla" => Ok(Arch::Relu),
            "jumprelu" => Ok(Arch::JumpRelu),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub n_latents: usize,
    pub k_active: usize,
    pub l1_coeff: f64,
    pub jump_sparsity_coeff: f64,
    pub bandwidth: f64,
    pub lambda_mono: f64,
    pub lr: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Examples without firing before a TopK latent is reinitialized.
    pub dead_threshold_examples: u64,
    pub seed: u64,
    /// Decoder is the encoder transpose.
    pub tied: bool,
    pub layer_norm: bool,
    pub epsilon_den: f64,
    /// Compute and log `L_mono` even when `lambda_mono` is zero.
    pub track_mono: bool,
}

impl TrainConfig {
    /// Full-scale hyperparameters (8192 latents, k = 64, 50 epochs of 2048).
    pub fn full_scale(arch: Arch) -> Self {
        TrainConfig {
            arch,
            n_latents: 8192,
            k_active: 64,
            l1_coeff: 1e-4,
            jump_sparsity_coeff: 1e-3,
            bandwidth: 1e-3,
            lambda_mono: 0.0,
            lr: 1e-4,
            adam_eps: 6.25e-10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            clip_norm: 1.0,
            batch_size: 2048,
            epochs: 50,
            dead_threshold_examples: 10 * 2048,
            seed: 42,
            tied: arch == Arch::TopK,
            layer_norm: false,
            epsilon_den: crate::monoscore::DEFAULT_EPSILON_DEN,
            track_mono: true,
        }
    }

    /// Same optimizer settings, sized for a laptop.
    pub fn desk(arch: Arch) -> Self {
        TrainConfig {
            n_latents: 256,
            k_active: 8,
            batch_size: 256,
            epochs: 10,
            dead_threshold_examples: 10 * 256,
            ..TrainConfig::full_scale(arch)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_latents == 0 {
            return bad("n_latents must be at least 1".into());
        }
        if matches!(self.arch, Arch::TopK | Arch::BatchTopK)
            && (self.k_active == 0 || self.k_active > self.n_latents)
        {
            return bad(format!(
                "k_active must be in 1..={} (got {})",
                self.n_latents, self.k_active
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 (got {})", self.batch_size));
        }
        for (name, v) in [
            ("l1_coeff", self.l1_coeff),
            ("jump_sparsity_coeff", self.jump_sparsity_coeff),
            ("lambda_mono", self.lambda_mono),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative (got {v})"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("bandwidth", self.bandwidth),
            ("epsilon_den", self.epsilon_den),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive (got {v})"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.tied && self.arch != Arch::TopK {
            log::debug!("tied weights requested for {}", self.arch);
        }
        Ok(())
    }

    pub fn mono_config(&self) -> crate::monoloss::MonoLossConfig {
        crate::monoloss::MonoLossConfig {
            lambda: self.lambda_mono,
            epsilon_den: self.epsilon_den,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub arch: Arch,
    pub tied: bool,
    pub layer_norm: bool,
    pub k_active: usize,
    pub bandwidth: f64,
    /// `M x d`.
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// `d x M`; columns are dictionary atoms.
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    /// JumpReLU only: `τ_k = exp(ℓ_k)`.
    pub log_thresholds: Array1<f64>,
    /// TopK only: examples since each latent last fired.
    pub dead_steps: Vec<u64>,
}

impl SaeModel {
    /// Encoder rows uniform in `±1/√d`, decoder its column-normalized
    /// transpose, zero biases. Tied models normalize the shared matrix.
    pub fn init<R: Rng + ?Sized>(cfg: &TrainConfig, dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::InvalidConfig("feature dimension must be positive".into()));
        }
        let m = cfg.n_latents;
        let bound = 1.0 / (dim as f64).sqrt();
        let w_enc = Array2::from_shape_fn((m, dim), |_| rng.random_range(-bound..bound));
        let mut model = SaeModel {
            arch: cfg.arch,
            tied: cfg.tied,
            layer_norm: cfg.layer_norm,
            k_active: cfg.k_active,
            bandwidth: cfg.bandwidth,
            w_dec: w_enc.t().to_owned(),
            w_enc,
            b_enc: Array1::zeros(m),
            b_dec: Array1::zeros(dim),
            log_thresholds: Array1::from_elem(m, INITIAL_LOG_THRESHOLD),
            dead_steps: vec![0; m],
        };
        model.normalize_decoder();
        Ok(model)
    }

    pub fn n_latents(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w_enc.ncols()
    }

    /// Rescales dictionary atoms to unit norm. For tied models the encoder
    /// rows are rescaled and copied into the decoder.
    pub fn normalize_decoder(&mut self) {
        if self.tied {
            for mut row in self.w_enc.axis_iter_mut(Axis(0)) {
                let norm = row.dot(&row).sqrt();
                if norm > 1e-12 {
                    row.mapv_inplace(|x| x / norm);
                }
            }
            self.sync_tied();
        } else {
            for mut col in self.w_dec.axis_iter_mut(Axis(1)) {
                let norm = col.dot(&col).sqrt();
                if norm > 1e-12 {
                    col.mapv_inplace(|x| x / norm);
                }
            }
        }
    }

    /// Copies `W_encᵀ` into `W_dec` for tied models; no-op otherwise.
    pub fn sync_tied(&mut self) {
        if self.tied {
            self.w_dec.assign(&self.w_enc.t());
        }
    }

    pub fn thresholds(&self) -> Array1<f64> {
        self.log_thresholds.mapv(f64::exp)
    }

    /// Sparse code `M x B` for a `B x d` batch.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(objective::forward(self, x)?.a)
    }

    /// `B x d` reconstruction of a `B x d` batch.
    pub fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(objective::forward(self, x)?.xhat)
    }

    /// Encodes a whole dataset in batches of `batch_size`, returning raw
    /// activations `M x N` and reconstructions `N x d`. BatchTopK selection
    /// is made within each batch, exactly as during training.
    pub fn encode_dataset(
        &self,
        features: &FeatureMatrix,
        batch_size: usize,
    ) -> Result<(ActivationMatrix, Array2<f64>)> {
        let n = features.n_samples();
        let batch_size = batch_size.max(1);
        let mut acts = Array2::zeros((self.n_latents(), n));
        let mut recon = Array2::zeros((n, self.dim()));
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let fwd = objective::forward(self, features.rows(start..end))?;
            acts.slice_mut(ndarray::s![.., start..end]).assign(&fwd.a);
            recon.slice_mut(ndarray::s![start..end, ..]).assign(&fwd.xhat);
            start = end;
        }
        Ok((ActivationMatrix::new(acts)?, recon))
    }
}
