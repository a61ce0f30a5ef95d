//! Experiment tracking: per-epoch scalars and figure references.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

/// Sink for training telemetry. Implementations must tolerate concurrent
/// writers from different folds.
pub trait Tracker {
    fn log(&self, fold: usize, epoch: usize, name: &str, value: f64);
    fn log_figure(&self, fold: usize, name: &str, path: &Path);
}

/// Discards everything.
pub struct NullTracker;

impl Tracker for NullTracker {
    fn log(&self, _: usize, _: usize, _: &str, _: f64) {}
    fn log_figure(&self, _: usize, _: &str, _: &Path) {}
}

/// Appends one JSON object per call to a line-delimited file. Each record is
/// emitted with a single append-mode write, so lines from separate processes
/// do not interleave.
pub struct JsonlTracker {
    path: PathBuf,
    trial: usize,
}

impl JsonlTracker {
    pub fn new(path: impl Into<PathBuf>, trial: usize) -> Self {
        Self { path: path.into(), trial }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, record: serde_json::Value) {
        let mut line = record.to_string();
        line.push('\n');
        let res = OpenOptions::new().create(true).append(true).open(&self.path).and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = res {
            log::warn!("tracker could not write {}: {e}", self.path.display());
        }
    }
}

impl Tracker for JsonlTracker {
    fn log(&self, fold: usize, epoch: usize, name: &str, value: f64) {
        let value = if value.is_finite() { json!(value) } else { json!(null) };
        self.append(json!({"trial": self.trial, "fold": fold, "epoch": epoch, "name": name, "value": value}));
    }

    fn log_figure(&self, fold: usize, name: &str, path: &Path) {
        self.append(json!({"trial": self.trial, "fold": fold, "figure": name, "path": path.display().to_string()}));
    }
}
