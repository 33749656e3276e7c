//! The three interchangeable normalization layers and the depthwise-kernel
//! stack planner.
//!
//! All three layers share the same contract: given a (batch, channel, height,
//! width) activation they subtract a per-channel mean estimate and divide by a
//! per-channel scale estimate, optionally followed by a learnable affine
//! transform. They differ in where the statistics come from:
//!
//! - [`BatchNormState`] — arithmetic batch statistics.
//! - [`DwckNormState`] — a learnable weighted mean computed by a stack of
//!   non-overlapping depthwise kernels (the plain variance is used around it
//!   by default; the weighted variance is available behind a flag).
//! - [`LearnedStatsState`] — mean and std emitted by two small 1-D
//!   convolution networks over the pooled channel profile.

pub mod batch;
pub mod dwck;
pub mod learned;
pub mod plan;

pub use batch::BatchNormState;
pub use dwck::{init_dwck, DwckNormState, NormOptions};
pub use learned::{build_stat_nets, Conv1dStage, LearnedStatsState};
pub use plan::{is_admissible, plan_dwck, DwckPlan, Stage};
