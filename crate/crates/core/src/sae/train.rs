use std::time::Instant;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dead::{handle_dead_latents, update_dead_counters};
use super::objective::{loss_and_grad_impl, Losses};
use super::optim::{optimizer_step, Adam};
use super::{Arch, SaeModel, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::evaluate_model;
use crate::types::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub recon: f64,
    pub sparsity: f64,
    pub mono: Option<f64>,
    pub total: f64,
    pub seconds: f64,
    pub reinitialized: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub n_samples: usize,
    pub dim: usize,
    pub epochs: Vec<EpochLog>,
    pub final_r2: Option<f64>,
    pub final_mean_monoscore: Option<f64>,
    pub dead_latents: usize,
    pub aborted: Option<String>,
}

impl TrainReport {
    fn new(cfg: &TrainConfig, features: &FeatureMatrix) -> Self {
        TrainReport {
            config: cfg.clone(),
            n_samples: features.n_samples(),
            dim: features.dim(),
            epochs: Vec::new(),
            final_r2: None,
            final_mean_monoscore: None,
            dead_latents: 0,
            aborted: None,
        }
    }
}

/// Training stopped early; `partial` holds every completed epoch.
#[derive(Debug, thiserror::Error)]
#[error("training failed: {error}")]
pub struct TrainFailure {
    pub error: Error,
    pub partial: Box<TrainReport>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub losses: Losses,
    pub reinitialized: Vec<usize>,
}

/// Model plus optimizer state, stepped one batch at a time.
pub struct Trainer {
    pub model: SaeModel,
    pub adam: Adam,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = SaeModel::init(cfg, dim, &mut rng)?;
        let adam = Adam::new(&model, cfg);
        Ok(Trainer {
            model,
            adam,
            cfg: cfg.clone(),
            rng,
        })
    }

    /// Next epoch's sample order.
    pub fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// Forward, backward, optimizer update, then dead-latent handling.
    pub fn step(&mut self, x: ArrayView2<'_, f64>) -> Result<StepOutcome> {
        let (losses, mut grads, fwd) = loss_and_grad_impl(&self.model, x, &self.cfg)?;
        optimizer_step(&mut self.model, &mut grads, &mut self.adam, &self.cfg)?;
        let mut reinitialized = Vec::new();
        if self.model.arch == Arch::TopK {
            update_dead_counters(&mut self.model, fwd.a.view());
            reinitialized = handle_dead_latents(
                &mut self.model,
                &mut self.adam,
                self.cfg.dead_threshold_examples,
                x,
                &fwd.xhat,
            );
        }
        Ok(StepOutcome {
            losses,
            reinitialized,
        })
    }
}

/// Trains from scratch. Deterministic for a given config and seed.
pub fn train(
    features: &FeatureMatrix,
    cfg: &TrainConfig,
) -> std::result::Result<(SaeModel, TrainReport), TrainFailure> {
    let mut report = TrainReport::new(cfg, features);
    let fail = |error: Error, mut report: TrainReport| {
        report.aborted = Some(error.to_string());
        TrainFailure {
            error,
            partial: Box::new(report),
        }
    };
    let mut trainer = match Trainer::new(cfg, features.dim()) {
        Ok(t) => t,
        Err(e) => return Err(fail(e, report)),
    };
    let n = features.n_samples();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = trainer.shuffled(n);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut mono_seen = false;
        let mut steps = 0;
        let mut reinit = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = features.select(chunk);
            let outcome = match trainer.step(batch.view()) {
                Ok(o) => o,
                Err(e) => {
                    log::error!("epoch {epoch} step {steps}: {e}");
                    return Err(fail(e, report));
                }
            };
            let l = outcome.losses;
            sums.0 += l.recon;
            sums.1 += l.sparsity;
            if let Some(m) = l.mono {
                sums.2 += m;
                mono_seen = true;
            }
            sums.3 += l.total;
            steps += 1;
            reinit += outcome.reinitialized.len();
        }
        let denom = steps.max(1) as f64;
        let log = EpochLog {
            epoch,
            steps,
            recon: sums.0 / denom,
            sparsity: sums.1 / denom,
            mono: mono_seen.then_some(sums.2 / denom),
            total: sums.3 / denom,
            seconds: started.elapsed().as_secs_f64(),
            reinitialized: reinit,
        };
        log::info!(
            "epoch {epoch}: recon {:.6} sparsity {:.6} mono {:?} ({:.2}s)",
            log.recon,
            log.sparsity,
            log.mono,
            log.seconds
        );
        report.epochs.push(log);
    }

    match evaluate_model(&trainer.model, features, cfg.batch_size, cfg.epsilon_den) {
        Ok(eval) => {
            report.final_r2 = eval.r2.as_ref().map(|r| r.mean);
            report.final_mean_monoscore = eval.scores.mean_active();
            report.dead_latents = eval.dead_latents;
        }
        Err(e) => log::warn!("final evaluation failed: {e}"),
    }
    Ok((trainer.model, report))
}

pub const EPOCH_CSV_HEADER: &str = "epoch,steps,recon,sparsity,mono,total,seconds,reinitialized";

pub fn write_epoch_csv<W: std::io::Write>(mut out: W, report: &TrainReport) -> std::io::Result<()> {
    writeln!(out, "{EPOCH_CSV_HEADER}")?;
    for e in &report.epochs {
        let mono = e.mono.map(|m| m.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.steps, e.recon, e.sparsity, mono, e.total, e.seconds, e.reinitialized
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small(arch: Arch) -> (FeatureMatrix, TrainConfig) {
        let data = generate_synthetic(&SyntheticSpec {
            n_clusters: 4,
            samples_per_cluster: 20,
            dim: 8,
            within_cluster_noise: 0.1,
            seed: 3,
        })
        .unwrap();
        let mut cfg = TrainConfig::desk(arch);
        cfg.n_latents = 16;
        cfg.k_active = 2;
        cfg.batch_size = 16;
        cfg.epochs = 3;
        cfg.lr = 1e-3;
        (data.features, cfg)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (x, mut cfg) = small(Arch::TopK);
        cfg.epochs = 0;
        let (model, report) = train(&x, &cfg).unwrap();
        let fresh = Trainer::new(&cfg, x.dim()).unwrap().model;
        assert_eq!(model, fresh);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        for arch in Arch::ALL {
            let (x, mut cfg) = small(arch);
            cfg.lambda_mono = 0.05;
            let (a, ra) = train(&x, &cfg).unwrap();
            let (b, rb) = train(&x, &cfg).unwrap();
            assert_eq!(a, b, "{arch}");
            assert_eq!(ra.epochs.len(), rb.epochs.len());
            for (ea, eb) in ra.epochs.iter().zip(&rb.epochs) {
                assert_eq!(ea.total.to_bits(), eb.total.to_bits());
            }
        }
    }

    #[test]
    fn zero_lambda_matches_untracked_training() {
        let (x, mut cfg) = small(Arch::BatchTopK);
        cfg.track_mono = true;
        let (tracked, _) = train(&x, &cfg).unwrap();
        cfg.track_mono = false;
        let (plain, report) = train(&x, &cfg).unwrap();
        assert_eq!(tracked, plain);
        assert!(report.epochs.iter().all(|e| e.mono.is_none()));
    }

    #[test]
    fn invalid_config_reports_failure() {
        let (x, mut cfg) = small(Arch::TopK);
        cfg.k_active = 100;
        let err = train(&x, &cfg).unwrap_err();
        assert!(matches!(err.error, Error::InvalidConfig(_)));
        assert!(err.partial.aborted.is_some());
    }

    #[test]
    fn epoch_csv_header() {
        let (x, mut cfg) = small(Arch::Relu);
        cfg.epochs = 1;
        let (_, report) = train(&x, &cfg).unwrap();
        let mut buf = Vec::new();
        write_epoch_csv(&mut buf, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(EPOCH_CSV_HEADER));
        assert_eq!(text.lines().count(), 2);
    }
}
