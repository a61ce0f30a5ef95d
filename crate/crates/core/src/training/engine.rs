//! K-fold training loop and per-fold artifacts.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use voxtrain_models::{build_model, ComposedModel, ModelError};
use voxtrain_tensor::nn::{Ctx, Module};
use voxtrain_tensor::{no_grad, weights, Element, Tensor, Var};

use super::losses::{LossError, MaskedLoss};
use super::optim::{EarlyStopping, Optimizer, OptimizerKind, Scheduler};
use super::tracker::{JsonlTracker, NullTracker, Tracker};
use crate::config::{save_config, Config, ConfigError, LabelKind, Settings, TrackingBackend};
use crate::dataset::{batch_order, Batch, CacheStrategy, Dataset, DatasetError};
use crate::evaluation::plots::render_plots;
use crate::evaluation::table::{compute_report, decision_threshold, summary_metric, write_metrics_csv, EndpointColumn, EndpointReport, PredictionRow, PredictionTable, TableError};
use crate::manifest::{load_manifest, split_train_test, stratified_kfold, DataContract, DataError, Fold, Manifest, TabularStats};
use crate::transforms::{Stage, TransformPlan};

pub const DONE: &str = "DONE";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("loss: {0}")]
    Loss(LossError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("fold {fold}: training loss became non-finite in epoch {epoch}")]
    NonFinite { fold: usize, epoch: usize },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Artifacts and summary of one trained fold.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    /// Best value of the monitored validation metric; NaN if it was never defined.
    pub best_value: f64,
    pub epochs_run: usize,
    /// Validation loss of the restored weights.
    pub val_loss: f64,
    pub val_reports: Vec<EndpointReport>,
    pub run_dir: PathBuf,
    pub config: PathBuf,
    pub weights: Option<PathBuf>,
    pub predictions_train: PathBuf,
    pub predictions_val: PathBuf,
    pub metrics_train: PathBuf,
    pub metrics_val: PathBuf,
    pub plots: Vec<PathBuf>,
}

impl FoldResult {
    /// Mean of a validation metric over endpoints; `loss` selects the validation loss.
    pub fn objective(&self, metric: &str) -> Option<f64> {
        if metric == "loss" {
            return self.val_loss.is_finite().then_some(self.val_loss);
        }
        summary_metric(&self.val_reports, metric)
    }
}

/// Settings plus the curated cohorts and folds they describe.
pub struct PreparedData {
    pub settings: Settings,
    pub train_val: Manifest,
    pub test: Manifest,
    pub folds: Vec<Fold>,
}

pub fn prepare(cfg: &Config) -> Result<PreparedData, TrainError> {
    let settings = cfg.settings()?;
    let manifest = load_manifest(&DataContract::from_settings(&settings))?;
    let (train_val, test) = split_train_test(&manifest)?;
    let folds = stratified_kfold(&train_val, settings.training.k, &settings.data.strat_columns(), settings.training.seed)?;
    Ok(PreparedData { settings, train_val, test, folds })
}

pub fn run_root(s: &Settings) -> PathBuf {
    s.output_dir.join(&s.experiment_name)
}

pub fn fold_dir(run_root: &Path, trial: usize, fold: usize) -> PathBuf {
    run_root.join(format!("trial_{trial}")).join(format!("fold_{fold}"))
}

pub fn make_tracker(s: &Settings, trial: usize) -> Box<dyn Tracker> {
    match s.tracking.backend {
        TrackingBackend::None => Box::new(NullTracker),
        TrackingBackend::Jsonl => {
            let root = run_root(s);
            if let Err(e) = fs::create_dir_all(&root) {
                log::warn!("cannot create {}: {e}", root.display());
            }
            Box::new(JsonlTracker::new(root.join("metrics.jsonl"), trial))
        }
    }
}

/// Standard mode: K-fold cross-validation as trial 0.
pub fn run_standard(cfg: &Config) -> Result<Vec<FoldResult>, TrainError> {
    let s = cfg.settings()?;
    run_trial(cfg, 0, make_tracker(&s, 0).as_ref())
}

/// Trains every configured fold into `<out>/<experiment>/trial_<trial>/`,
/// stopping at the first failing fold.
pub fn run_trial(cfg: &Config, trial: usize, tracker: &dyn Tracker) -> Result<Vec<FoldResult>, TrainError> {
    let data = prepare(cfg)?;
    let root = run_root(&data.settings);
    let mut out = Vec::new();
    for k in data.settings.training.folds() {
        let result = train_fold(cfg, &data.train_val, &data.folds[k], &fold_dir(&root, trial, k), tracker)?;
        log::info!("fold {k}: best {} = {:.4} at epoch {}", data.settings.training.early_stopping.monitor, result.best_value, result.best_epoch);
        out.push(result);
    }
    Ok(out)
}

pub fn endpoint_columns(s: &Settings) -> Vec<EndpointColumn> {
    s.data.labels.iter().map(|l| EndpointColumn { name: l.name.clone(), kind: l.kind }).collect()
}

/// Model for one fold; initial weights depend only on the seed and fold index.
pub fn build_fold_model(s: &Settings, n_tabular: usize, fold: usize) -> Result<ComposedModel<f32>, TrainError> {
    let seed = s.training.seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    Ok(build_model(&s.encoder_spec()?, &s.output_spec(), &s.endpoints(), s.data.modalities.len(), n_tabular, seed)?)
}

fn inputs(b: &Batch) -> (Option<Var<f32>>, Option<Var<f32>>) {
    let images = b.images.as_ref().map(|t| Var::constant(t.clone()));
    let tabular = (b.tabular.shape()[1] > 0).then(|| Var::constant(b.tabular.clone()));
    (images, tabular)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw model outputs with the matching labels, flattened row-major `(N, E)`.
pub struct Predictions {
    pub table: PredictionTable,
    pub outputs: Vec<f64>,
    pub labels: Vec<f64>,
    pub times: Vec<f64>,
    pub masks: Vec<bool>,
}

/// Evaluation-mode forward pass over a whole dataset in its stored order.
pub fn predict(model: &ComposedModel<f32>, ds: &Dataset, batch_size: usize, endpoints: &[EndpointColumn]) -> Result<Predictions, TrainError> {
    let _guard = no_grad();
    let e = endpoints.len();
    let mut p = Predictions { table: PredictionTable { endpoints: endpoints.to_vec(), rows: Vec::new() }, outputs: vec![], labels: vec![], times: vec![], masks: vec![] };
    let order: Vec<usize> = (0..ds.len()).collect();
    for idx in order.chunks(batch_size.max(1)) {
        let b = ds.eval_batch(idx)?;
        let (images, tabular) = inputs(&b);
        let out = model.forward(images.as_ref(), tabular.as_ref(), &mut Ctx::eval())?;
        let (o, y, t, m) = (out.value().to_f64_vec(), b.labels.to_f64_vec(), b.times.to_f64_vec(), b.masks.data().to_vec());
        for (r, id) in b.patient_ids.iter().enumerate() {
            let row = r * e..(r + 1) * e;
            p.table.rows.push(PredictionRow {
                patient_id: id.clone(),
                preds: endpoints.iter().zip(&o[row.clone()]).map(|(c, &z)| if c.kind == LabelKind::Binary { sigmoid(z) } else { z }).collect(),
                labels: y[row.clone()].to_vec(),
                times: t[row.clone()].to_vec(),
                observed: m[row].iter().map(|&v| v > 0.5).collect(),
            });
        }
        p.outputs.extend(o);
        p.labels.extend(y);
        p.times.extend(t);
        p.masks.extend(m.iter().map(|&v| v > 0.5));
    }
    Ok(p)
}

fn snapshot(m: &dyn Module<f32>) -> Vec<Tensor<f32>> {
    m.named_slots().iter().map(|(_, s)| s.value()).collect()
}

fn restore(m: &dyn Module<f32>, values: &[Tensor<f32>]) {
    for ((_, s), v) in m.named_slots().iter().zip(values) {
        s.set(v.clone());
    }
}

/// Trains one fold and writes its artifacts into `run_dir`, replacing any
/// previous contents. `DONE` is written last.
pub fn train_fold(cfg: &Config, manifest: &Manifest, fold: &Fold, run_dir: &Path, tracker: &dyn Tracker) -> Result<FoldResult, TrainError> {
    let s = cfg.settings()?;
    let k = fold.index;
    if run_dir.exists() {
        fs::remove_dir_all(run_dir).map_err(io_err(run_dir))?;
    }
    let plots_dir = run_dir.join("plots");
    fs::create_dir_all(&plots_dir).map_err(io_err(&plots_dir))?;

    let mut fold_cfg = cfg.clone();
    fold_cfg.set("training.folds_to_run", serde_yaml::to_value(vec![k]).expect("fold list serializes"))?;
    let config_path = run_dir.join("config.yaml");
    save_config(&fold_cfg, &config_path)?;

    let train_m = manifest.subset(&fold.train)?;
    let val_m = manifest.subset(&fold.val)?;
    let stats = TabularStats::fit(&train_m);
    let stats_path = run_dir.join("tabular_stats.csv");
    stats.write_csv(&stats_path).map_err(io_err(&stats_path))?;

    let plan = TransformPlan::from_settings(&s);
    let strategy = CacheStrategy::from_settings(&s);
    let mut train_ds = Dataset::build(&train_m, &plan, &stats, &strategy, Stage::Train)?;
    let val_ds = Dataset::build(&val_m, &plan, &stats, &strategy, Stage::Eval)?;
    let kinds = train_ds.label_kinds().to_vec();
    let endpoints = endpoint_columns(&s);

    let (mut y, mut m) = (Vec::new(), Vec::new());
    for r in &train_m.records {
        y.extend(r.labels.iter().map(|l| l.value));
        m.extend(r.labels.iter().map(|l| l.observed));
    }
    let loss = MaskedLoss::from_settings(&s.training.loss, kinds, &y, &m);

    let model = build_fold_model(&s, stats.names.len(), k)?;
    let t = &s.training;
    let lr0 = t.optimizer.lr;
    let mut opt = Optimizer::new(OptimizerKind::from_settings(&t.optimizer), model.parameters(), lr0);
    let (monitor, higher_is_better) = t.monitor();
    let mut sched = Scheduler::new(&t.scheduler, lr0, t.epochs, higher_is_better);
    let mut stopper = EarlyStopping::new(t.early_stopping.patience, higher_is_better);
    let mut eval_settings = s.evaluation.clone();
    if monitor != "loss" && !eval_settings.metrics.contains(&monitor) {
        eval_settings.metrics.push(monitor.clone());
    }
    let bs = s.dataset.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(k as u64 + 1);

    let mut best = snapshot(&model);
    let mut epochs_run = 0;
    for epoch in 1..=t.epochs {
        if epoch > 1 {
            train_ds.next_epoch()?;
        }
        let lr = sched.lr();
        let (mut total, mut seen) = (0.0, 0usize);
        for idx in batch_order(train_ds.len(), bs, true, &mut rng) {
            // A lone sample gives degenerate batch statistics.
            if idx.len() == 1 && train_ds.len() > 1 {
                continue;
            }
            let batch = train_ds.load_batch(&idx, &mut rng)?;
            let (images, tabular) = inputs(&batch);
            let out = model.forward(images.as_ref(), tabular.as_ref(), &mut Ctx::train(&mut rng))?;
            let l = match loss.forward(&out, &batch.labels, &batch.times, &batch.masks) {
                Ok(l) => l,
                Err(LossError::AllMasked) => {
                    log::warn!("fold {k} epoch {epoch}: batch without observed labels skipped");
                    continue;
                }
                Err(e) => return Err(TrainError::Loss(e)),
            };
            let v = l.item().f64();
            if !v.is_finite() {
                return Err(TrainError::NonFinite { fold: k, epoch });
            }
            opt.zero_grad();
            l.backward();
            opt.step(lr);
            total += v * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = if seen > 0 { total / seen as f64 } else { f64::NAN };

        let val = predict(&model, &val_ds, bs, &endpoints)?;
        let val_loss = loss.evaluate(&val.outputs, &val.labels, &val.times, &val.masks).map_or(f64::NAN, |l| l.value);
        let reports = compute_report(&val.table, &eval_settings, None);
        let monitored = if monitor == "loss" { val_loss } else { summary_metric(&reports, &monitor).unwrap_or(f64::NAN) };

        tracker.log(k, epoch, "train_loss", train_loss);
        tracker.log(k, epoch, "val_loss", val_loss);
        tracker.log(k, epoch, "lr", lr);
        for name in &s.evaluation.metrics {
            if let Some(v) = summary_metric(&reports, name) {
                tracker.log(k, epoch, &format!("val_{name}"), v);
            }
        }

        epochs_run = epoch;
        if stopper.update(epoch, monitored) {
            best = snapshot(&model);
        }
        sched.step(epoch, Some(monitored));
        if stopper.should_stop() {
            break;
        }
    }
    if stopper.best.is_none() {
        best = snapshot(&model);
        stopper.best_epoch = epochs_run;
    }
    restore(&model, &best);

    let weights_path = run_dir.join("weights.bin");
    let weights = if t.save_weights {
        weights::save(&model, &weights_path).map_err(io_err(&weights_path))?;
        Some(weights_path)
    } else {
        None
    };

    let val = predict(&model, &val_ds, bs, &endpoints)?;
    let train = predict(&model, &train_ds, bs, &endpoints)?;
    let val_loss = loss.evaluate(&val.outputs, &val.labels, &val.times, &val.masks).map_or(f64::NAN, |l| l.value);
    let thresholds: Vec<Option<f64>> = (0..endpoints.len()).map(|e| decision_threshold(s.evaluation.threshold, &val.table.observed(e))).collect();
    let val_reports = compute_report(&val.table, &eval_settings, Some(&thresholds));
    let train_reports = compute_report(&train.table, &eval_settings, Some(&thresholds));

    let paths = ["predictions_train.csv", "predictions_val.csv", "metrics_train.csv", "metrics_val.csv"].map(|f| run_dir.join(f));
    train.table.write_csv(&paths[0])?;
    val.table.write_csv(&paths[1])?;
    write_metrics_csv(&train_reports, &eval_settings.metrics, &paths[2])?;
    write_metrics_csv(&val_reports, &eval_settings.metrics, &paths[3])?;
    let mut plots = render_plots(&val.table, &s.evaluation, &thresholds, &plots_dir, "val_")?;
    plots.extend(render_plots(&train.table, &s.evaluation, &thresholds, &plots_dir, "train_")?);
    for p in &plots {
        let name = p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        tracker.log_figure(k, &name, p);
    }

    let done = run_dir.join(DONE);
    fs::write(&done, format!("best_epoch={}\n", stopper.best_epoch)).map_err(io_err(&done))?;
    let [predictions_train, predictions_val, metrics_train, metrics_val] = paths;
    Ok(FoldResult {
        fold: k,
        best_epoch: stopper.best_epoch,
        best_value: stopper.best.unwrap_or(f64::NAN),
        epochs_run,
        val_loss,
        val_reports,
        run_dir: run_dir.to_path_buf(),
        config: config_path,
        weights,
        predictions_train,
        predictions_val,
        metrics_train,
        metrics_val,
        plots,
    })
}
