//! Independent brute-force references used by the test suites: central-
//! difference gradients over a from-scratch `f64` forward pass, a naive
//! replay of the memory-bank adding algorithm, closed-form EMA and alignment
//! recurrences, two-pass statistics, and slot-histogram measures for
//! correlation checks.
//!
//! Nothing here imports the engine crate; every routine is a separate
//! implementation of the contract it checks, running in `f64` throughout.

pub mod bank_replay;
pub mod finite_diff;
pub mod recurrence;
pub mod refnet;
pub mod report;
pub mod stats;

pub use bank_replay::{replay_bank, ReplayConfig, ReplayEvent, ReplayRecord, ReplayRule};
pub use finite_diff::{central_diff_grad, compare_grads, GradCheckSummary};
pub use recurrence::{ema_closed_form, ema_fold_vec, target_stats_fold, StatBatch};
pub use refnet::{RefLayer, RefNet};
pub use report::OracleReport;
pub use stats::{
    channel_stats, normalized_class_entropy, slot_histograms, two_pass_mean_var,
};
