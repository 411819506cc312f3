//! Composite surrogate: final-damage prediction, pre- and post-UTS increment
//! networks, teacher-forced training and auto-regressive rollout.

pub mod bundle;
pub mod dataset;
pub mod models;
pub mod rollout;
pub mod train;

pub use bundle::{Bundle, BundleManifest};
pub use dataset::{Sample, Stage};
pub use models::{FinalDamageModel, IncrementModel, Increments, OracleEcho, StepInput, UNetFinalDamage, UNetIncrement};
pub use rollout::{rollout_case, rollout_from, should_switch, CompositeState, Phase, RolloutParams, RolloutResult};
pub use train::{stage_config, train_stage, ArchParams, TrainOutcome, TrainParams};
