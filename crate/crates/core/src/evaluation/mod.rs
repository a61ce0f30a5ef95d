//! Metrics, plots and post-hoc test-set evaluation.

pub mod metrics;
pub mod plots;
pub mod table;
pub mod test_eval;
