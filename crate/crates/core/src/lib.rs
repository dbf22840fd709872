//! Monosemanticity scoring and training.
//!
//! * [`monoscore`]: pairwise and single-pass MonoScore.
//! * [`monoloss`]: the batch MonoLoss with an analytic gradient.
//! * [`sae`]: TopK, BatchTopK, ReLU and JumpReLU sparse autoencoders.
//! * [`metrics`]: streaming R², class purity, score curves.
//! * [`data`]: feature files, labels, synthetic clustered data.
//! * [`bench`]: wall-clock scaling harness.

pub mod bench;
pub mod data;
pub mod error;
pub mod metrics;
pub mod monoloss;
pub mod monoscore;
pub mod sae;
pub mod types;

pub use error::{Error, Result};
pub use monoloss::{monoloss_backward, monoloss_forward, total_loss, MonoLossConfig, MonoLossOutput};
pub use monoscore::{
    accumulate_stats, finalize_scores, minmax_normalize, monoscore_linear, monoscore_pairwise,
    Algorithm, Extrema, MonoScoreConfig,
};
pub use types::{merge_stats, normalize_rows, ActivationMatrix, FeatureMatrix, LatentScores, MonoStats};
pub use data::{generate_synthetic, read_features, write_features, SyntheticData, SyntheticSpec};
pub use metrics::{class_purity, evaluate_model, monoscore_curve, R2Accumulator, R2Summary};
pub use sae::{train, Arch, SaeModel, TrainConfig, TrainReport};
pub use bench::{run_bench, BenchConfig, BenchResult};
