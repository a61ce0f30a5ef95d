//! Per-fold training: losses, optimizers, tracking and the fold loop.

pub mod engine;
pub mod losses;
pub mod optim;
pub mod tracker;

pub use engine::{fold_dir, prepare, run_root, run_standard, run_trial, train_fold, FoldResult, PreparedData, TrainError};
