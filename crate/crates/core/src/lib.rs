//! Estimate how much each training instance contributed to a model's
//! validation loss, directly from the SGD trajectory.
//!
//! Training runs under [`trainer::train`] with every step logged (minibatch
//! membership, learning rate) and parameter checkpoints persisted under a
//! configurable [`cache::CheckpointPolicy`]. The influence of instance `j` is
//! the first-order estimate of `val_loss(θ without j) - val_loss(θ)`,
//! computed by [`influence::lie_backward`], which retraces the last epoch
//! backward, propagating a query vector through minibatch Hessian-vector
//! products. Two parameter sources are supported: the per-step checkpoints
//! (`StoredParams`, needs a `LastEpoch` or `All` cache) and the final
//! parameters alone (`FinalParamsOnly`, needs only a `FinalOnly` cache —
//! cutting checkpoint storage by a factor of the per-epoch step count).
//!
//! [`oracle`] provides exact leave-one-out ground truth by counterfactual
//! replay, and [`pipeline`] drives the end-to-end cleansing experiment:
//! score, remove the most negative instances, retrain, evaluate.
//!
//! Batch-level inner loops run on rayon when the `parallel` feature
//! (default) is enabled; reductions are always performed in a fixed order,
//! so results are bit-identical to the sequential build.

pub mod cache;
pub mod dataset;
pub mod error;
pub mod influence;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod pipeline;
pub mod trainer;

pub use cache::{cache_stats, CacheReader, CacheStats, CacheView, CheckpointPolicy, FloatWidth, InfluenceCache};
pub use dataset::{gen_blobs, inject_label_noise, load_csv, split, Dataset, Instance, LabelColumn, NoiseReport};
pub use error::{Error, Result};
pub use influence::{lie_backward, query_from_validation, rank_instances, InfluenceScores, ParamSource, QueryVector, TraceWindow};
pub use model::{Activation, ModelSpec, ParamVector};
pub use oracle::{loo_all, rank_agreement, Agreement, LooResult};
pub use pipeline::{cleanse_once, cleanse_sweep, CleanseConfig, CleanseCurve, Strategy, SweepData, SweepOutcome};
pub use trainer::{counterfactual_train, make_schedule, steps_per_epoch, train, train_from, ReplayStart, Schedule, SgdStepRecord, TrainConfig, TrainLog, TrainOutput};

/// Derives a child seed from a base seed and a role tag.
///
/// Used wherever a single user-facing seed has to drive several independent
/// random choices (init, per-epoch shuffles, noise injection, retraining).
/// SplitMix64 finalizer; stable across platforms and releases.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Role tags for [`derive_seed`]. One tag per distinct consumer.
pub mod seed_tags {
    pub const INIT: u64 = 1;
    /// Per-epoch shuffle: `SHUFFLE_BASE + epoch`.
    pub const SHUFFLE_BASE: u64 = 1000;
    pub const RETRAIN: u64 = 2;
    pub const RANDOM_REMOVAL: u64 = 3;
}
