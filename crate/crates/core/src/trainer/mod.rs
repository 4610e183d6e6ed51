//! Optimizer, the meta-train/meta-test loop, the plain supervised
//! baseline, and run records.

mod adam;
mod config;
mod meta;
mod record;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use config::{
    ContrastiveSection, DgSection, LossVariant, MetricsSection, ModelSection, Selection,
    StatsRefresh, TrainConfig, TrainSection,
};
pub use meta::{
    derive_seed, erm_schedule, erm_train, erm_train_schedule, initial_params, inner_schedule,
    inner_train_step, meta_round, meta_test_step, name_hash, plan_round, round_seed, source_stats,
    train, train_from, InnerLoss, MetaTestOutput, RoundPlan,
};
pub use record::{RoundRecord, RunRecord, UpdateCounts};
