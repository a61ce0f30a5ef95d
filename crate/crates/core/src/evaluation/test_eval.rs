//! Post-hoc test-set evaluation of trained folds and their ensemble.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use voxtrain_tensor::weights;

use super::plots::render_plots;
use super::table::{compute_report, decision_threshold, write_metrics_csv, EndpointReport, PredictionTable, TableError};
use crate::config::{load_config, ConfigError, Settings};
use crate::dataset::{CacheStrategy, Dataset};
use crate::manifest::{Manifest, Split, TabularStats};
use crate::training::engine::{build_fold_model, endpoint_columns, predict, DONE};
use crate::training::TrainError;
use crate::transforms::{Stage, TransformPlan};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no completed folds under {0}")]
    NoCompletedFolds(PathBuf),
    #[error("fold {fold}: weights file {path} is missing")]
    WeightsMissing { fold: usize, path: PathBuf },
    #[error("the cohort has no test-split patients")]
    NoTestPatients,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Test-set predictions and metrics of one fold model or of the ensemble.
#[derive(Clone, Debug)]
pub struct CohortReport {
    /// Fold index; `None` for the ensemble.
    pub fold: Option<usize>,
    pub dir: PathBuf,
    pub table: PredictionTable,
    pub reports: Vec<EndpointReport>,
}

#[derive(Debug)]
pub struct TestEvaluation {
    pub folds: Vec<CohortReport>,
    pub ensemble: CohortReport,
    /// Completed folds that could not be evaluated.
    pub skipped: Vec<(usize, EvalError)>,
}

/// Test-split patients of a manifest.
pub fn test_cohort(m: &Manifest) -> Result<Manifest, EvalError> {
    let ids: Vec<String> = m.records.iter().filter(|r| r.split == Split::Test).map(|r| r.patient_id.clone()).collect();
    if ids.is_empty() {
        return Err(EvalError::NoTestPatients);
    }
    m.subset(&ids).map_err(|e| EvalError::Train(e.into()))
}

/// `fold_<k>` directories holding a `DONE` sentinel, in fold order.
pub fn completed_folds(trial_dir: &Path) -> Vec<(usize, PathBuf)> {
    let mut out: Vec<(usize, PathBuf)> = fs::read_dir(trial_dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let k = e.file_name().to_str()?.strip_prefix("fold_")?.parse().ok()?;
            let dir = e.path();
            dir.join(DONE).is_file().then_some((k, dir))
        })
        .collect();
    out.sort();
    out
}

fn thresholds_from(s: &Settings, val_tables: &[PredictionTable]) -> Vec<Option<f64>> {
    let Some(first) = val_tables.first() else { return Vec::new() };
    let pooled = PredictionTable { endpoints: first.endpoints.clone(), rows: val_tables.iter().flat_map(|t| t.rows.iter().cloned()).collect() };
    (0..pooled.endpoints.len()).map(|e| decision_threshold(s.evaluation.threshold, &pooled.observed(e))).collect()
}

fn write_cohort(dir: &Path, table: &PredictionTable, reports: &[EndpointReport], s: &Settings, thresholds: &[Option<f64>]) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    table.write_csv(&dir.join("predictions_test.csv"))?;
    write_metrics_csv(reports, &s.evaluation.metrics, &dir.join("metrics_test.csv"))?;
    render_plots(table, &s.evaluation, thresholds, &dir.join("plots"), "test_")?;
    Ok(())
}

fn evaluate_fold(k: usize, dir: &Path, test: &Manifest) -> Result<(Settings, PredictionTable, PredictionTable), EvalError> {
    let weights_path = dir.join("weights.bin");
    if !weights_path.is_file() {
        return Err(EvalError::WeightsMissing { fold: k, path: weights_path });
    }
    let s = load_config(&dir.join("config.yaml"))?.settings()?;
    let stats = TabularStats::read_csv(&dir.join("tabular_stats.csv")).map_err(|e| EvalError::Train(e.into()))?;
    let model = build_fold_model(&s, stats.names.len(), k)?;
    weights::load(&model, &weights_path).map_err(|source| EvalError::Io { path: weights_path.clone(), source })?;
    let ds = Dataset::build(test, &TransformPlan::from_settings(&s), &stats, &CacheStrategy::from_settings(&s), Stage::Eval).map_err(|e| EvalError::Train(e.into()))?;
    let table = predict(&model, &ds, s.dataset.batch_size, &endpoint_columns(&s))?.table;
    let val = PredictionTable::read_csv(&dir.join("predictions_val.csv"))?;
    Ok((s, table, val))
}

/// Evaluates every completed fold under `trial_dir` on `test` and writes
/// `test_eval/fold_<k>/` plus `test_eval/ensemble/` beside the fold directories.
///
/// Fold thresholds come from that fold's validation predictions; the ensemble
/// threshold comes from the pooled out-of-fold validation predictions.
pub fn evaluate_test(trial_dir: &Path, test: &Manifest) -> Result<TestEvaluation, EvalError> {
    let done = completed_folds(trial_dir);
    if done.is_empty() {
        return Err(EvalError::NoCompletedFolds(trial_dir.to_path_buf()));
    }
    let out_root = trial_dir.join("test_eval");
    if out_root.exists() {
        fs::remove_dir_all(&out_root).map_err(|source| EvalError::Io { path: out_root.clone(), source })?;
    }
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    let mut vals = Vec::new();
    let mut settings = None;
    for (k, dir) in done {
        match evaluate_fold(k, &dir, test) {
            Ok((s, table, val)) => {
                let thresholds = thresholds_from(&s, std::slice::from_ref(&val));
                let reports = compute_report(&table, &s.evaluation, Some(&thresholds));
                let out = out_root.join(format!("fold_{k}"));
                write_cohort(&out, &table, &reports, &s, &thresholds)?;
                folds.push(CohortReport { fold: Some(k), dir: out, table, reports });
                vals.push(val);
                settings.get_or_insert(s);
            }
            Err(e @ EvalError::WeightsMissing { .. }) => {
                log::warn!("{e}");
                skipped.push((k, e));
            }
            Err(e) => return Err(e),
        }
    }
    let Some(s) = settings else {
        return Err(skipped.into_iter().next().map(|(_, e)| e).expect("at least one completed fold"));
    };
    let tables: Vec<PredictionTable> = folds.iter().map(|f| f.table.clone()).collect();
    let table = PredictionTable::ensemble(&tables)?;
    let thresholds = thresholds_from(&s, &vals);
    let reports = compute_report(&table, &s.evaluation, Some(&thresholds));
    let dir = out_root.join("ensemble");
    write_cohort(&dir, &table, &reports, &s, &thresholds)?;
    Ok(TestEvaluation { folds, ensemble: CohortReport { fold: None, dir, table, reports }, skipped })
}
