mod common;

use monosema::data::{generate_synthetic, SyntheticSpec};
use monosema::sae::objective::forward;
use monosema::sae::train::Trainer;
use monosema::sae::{train, Arch, TrainConfig};
use monosema::types::FeatureMatrix;
use ndarray::Axis;

fn clusters() -> FeatureMatrix {
    generate_synthetic(&SyntheticSpec {
        n_clusters: 8,
        samples_per_cluster: 40,
        dim: 16,
        within_cluster_noise: 0.1,
        seed: 11,
    })
    .unwrap()
    .features
}

fn config(arch: Arch) -> TrainConfig {
    let mut cfg = TrainConfig::desk(arch);
    cfg.n_latents = 32;
    cfg.k_active = 4;
    cfg.batch_size = 32;
    cfg.epochs = 6;
    cfg.lr = 1e-3;
    cfg.lambda_mono = 0.01;
    cfg.dead_threshold_examples = 320;
    cfg
}

#[test]
fn reconstruction_improves_for_every_architecture() {
    let x = clusters();
    for arch in Arch::ALL {
        let (_, report) = train(&x, &config(arch)).unwrap();
        let first = report.epochs.first().unwrap().recon;
        let last = report.epochs.last().unwrap().recon;
        assert!(last < first, "{arch}: {first} -> {last}");
        assert!(report.final_r2.unwrap().is_finite());
    }
}

#[test]
fn decoder_atoms_stay_unit_norm() {
    let x = clusters();
    for arch in Arch::ALL {
        let cfg = config(arch);
        let mut t = Trainer::new(&cfg, x.dim()).unwrap();
        let n = x.n_samples();
        let mut steps = 0;
        while steps < 200 {
            for chunk in t.shuffled(n).chunks(cfg.batch_size) {
                if steps == 200 {
                    break;
                }
                t.step(x.select(chunk).view()).unwrap();
                steps += 1;
                for col in t.model.w_dec.axis_iter(Axis(1)) {
                    let norm = col.dot(&col).sqrt();
                    assert!((norm - 1.0).abs() <= 1e-6, "{arch} step {steps}: {norm}");
                }
            }
        }
    }
}

#[test]
fn topk_codes_have_exact_support() {
    let x = clusters();
    for arch in [Arch::TopK, Arch::BatchTopK] {
        let cfg = config(arch);
        let (model, _) = train(&x, &cfg).unwrap();
        for start in (0..x.n_samples()).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(x.n_samples());
            let fwd = forward(&model, x.rows(start..end)).unwrap();
            let k = cfg.k_active;
            match arch {
                Arch::TopK => {
                    for (zc, ac) in fwd.z.axis_iter(Axis(1)).zip(fwd.a.axis_iter(Axis(1))) {
                        let positive = zc.iter().filter(|v| **v > 0.0).count();
                        let nonzero = ac.iter().filter(|v| **v != 0.0).count();
                        assert_eq!(nonzero, k.min(positive));
                    }
                }
                _ => {
                    let positive = fwd.z.iter().filter(|v| **v > 0.0).count();
                    let nonzero = fwd.a.iter().filter(|v| **v != 0.0).count();
                    assert_eq!(nonzero, (k * (end - start)).min(positive));
                }
            }
        }
    }
}

#[test]
fn relu_and_jumprelu_codes_are_nonnegative_and_gated() {
    let x = clusters();
    for arch in [Arch::Relu, Arch::JumpRelu] {
        let (model, _) = train(&x, &config(arch)).unwrap();
        let fwd = forward(&model, x.view()).unwrap();
        let tau = model.thresholds();
        for ((zr, ar), &t) in fwd.z.axis_iter(Axis(0)).zip(fwd.a.axis_iter(Axis(0))).zip(&tau) {
            for (&z, &a) in zr.iter().zip(ar) {
                assert!(a >= 0.0);
                let gate = if arch == Arch::JumpRelu { t } else { 0.0 };
                assert_eq!(a, if z > gate { z } else { 0.0 });
            }
        }
    }
}
