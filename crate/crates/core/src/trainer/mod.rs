//! Policy optimization: GAE and group-normalized (GRPO) advantages, the
//! clipped-surrogate update with a per-state KL trust region, the value
//! baseline, and the outer training loop that interleaves rollouts against an
//! experience model with curriculum expansion.

mod advantages;
mod train;
mod update;
mod value;

pub use advantages::{
    gae_advantages, group_stats, grpo_advantages, grpo_step_advantages, AdvantageBatch, Estimator, GroupStats,
    RewardAssignment,
};
pub use train::{
    load_policy, Algorithm, CurriculumConfig, EvalConfig, EvalSummary, IterMetrics, OptimConfig, PolicyCheckpoint, RolloutConfig,
    TrainConfig, TrainReport, Trainer, TrainerState,
};
pub use update::{build_samples, policy_update, sample_kl_radius, surrogate, surrogate_grad, Sample, UpdateConfig, UpdateMetrics};
pub use value::{fit_values, return_targets, FitReport, ValueEstimator};
