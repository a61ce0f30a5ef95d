//! Subcommands of the `voxtrain` binary.
//!
//! Exit codes: 0 success, 1 training failure, 2 config or usage error,
//! 3 data error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_yaml::Value;
use voxtrain::config::{load_config, Config, Direction};
use voxtrain::error::{Error, EXIT_DATA};
use voxtrain::evaluation::test_eval::{evaluate_test, test_cohort};
use voxtrain::hpo::{best_config, run_experiment};
use voxtrain::manifest::{load_manifest, validate_data, DataContract};
use voxtrain::synthetic::{make_synthetic, SyntheticSpec};
use voxtrain::training::{run_root, run_standard};

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "VOXTRAIN_OUT";

#[derive(Debug, Parser)]
#[command(name = "voxtrain", version, about = "Config-driven K-fold training and evaluation for 3D medical images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run K-fold cross-validation with the configured hyperparameters.
    Train(TrainArgs),
    /// Search hyperparameters; every trial is a full K-fold run.
    Tune(TuneArgs),
    /// Evaluate trained folds and their ensemble on the test split.
    Test(TestArgs),
    /// Check the clinical table and volume tree against the config.
    ValidateData(ValidateArgs),
    /// Write a synthetic cohort with a ready-to-run config.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated fold indices to train.
    #[arg(long, value_delimiter = ',')]
    pub folds: Option<Vec<usize>>,
    /// Output root; overrides `output_dir` in the config.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DirectionArg {
    Max,
    Min,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    /// Defaults to `experiment.direction`.
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Discard an existing study instead of resuming it.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Trial directory holding `fold_<k>` folders, or an experiment directory with a single trial.
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Volume root of an external cohort.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Clinical table of an external cohort.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub n: usize,
    /// Volume shape as H,W,D.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "16,16,16")]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub summary: String,
}

pub fn run(cli: Cli) -> CommandResult {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Tune(a) => cmd_tune(&a),
        Command::Test(a) => cmd_test(&a),
        Command::ValidateData(a) => return cmd_validate_data(&a),
        Command::MakeSynthetic(a) => cmd_make_synthetic(&a),
    };
    match result {
        Ok(summary) => CommandResult { exit_code: 0, summary },
        Err(e) => CommandResult { exit_code: e.exit_code(), summary: format!("error: {e}") },
    }
}

fn absolute(p: &Path) -> Result<PathBuf, Error> {
    Ok(std::path::absolute(p)?)
}

fn path_value(p: &Path) -> Result<Value, Error> {
    Ok(Value::String(absolute(p)?.to_string_lossy().into_owned()))
}

/// Loads a config, resolving its relative paths against the file's directory.
pub fn load(config: &Path, out: Option<&Path>) -> Result<Config, Error> {
    let mut cfg = load_config(config)?;
    let dir = config.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.resolve_paths(&absolute(dir)?)?;
    if let Some(out) = out {
        cfg.set("output_dir", path_value(out)?)?;
    }
    Ok(cfg)
}

fn remove_dir(p: &Path) -> Result<(), Error> {
    if p.exists() {
        fs::remove_dir_all(p)?;
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<String, Error> {
    let mut cfg = load(&a.config, a.out.as_deref())?;
    if let Some(folds) = &a.folds {
        cfg.set("training.folds_to_run", Value::Sequence(folds.iter().map(|&f| Value::from(f as u64)).collect()))?;
    }
    let s = cfg.settings()?;
    let trial_dir = run_root(&s).join("trial_0");
    if trial_dir.exists() {
        if !a.overwrite {
            return Err(Error::Usage(format!("{} already exists; pass --overwrite to replace it", trial_dir.display())));
        }
        remove_dir(&trial_dir)?;
    }
    let results = run_standard(&cfg)?;
    let mut out = String::new();
    for r in &results {
        let _ = writeln!(out, "fold {}: best {} = {:.6} (epoch {} of {})", r.fold, s.training.early_stopping.monitor, r.best_value, r.best_epoch, r.epochs_run);
    }
    let _ = write!(out, "run directory: {}", trial_dir.display());
    Ok(out)
}

pub fn cmd_tune(a: &TuneArgs) -> Result<String, Error> {
    let cfg = load(&a.config, a.out.as_deref())?;
    let s = cfg.settings()?;
    let root = run_root(&s);
    if a.overwrite {
        remove_dir(&root)?;
    }
    let direction = match a.direction {
        Some(DirectionArg::Max) => Direction::Maximize,
        Some(DirectionArg::Min) => Direction::Minimize,
        None => s.experiment.direction,
    };
    let study = run_experiment(&cfg, a.trials as usize, direction)?;
    let best = study.best().expect("run_experiment guarantees a complete trial");
    let best_path = root.join("best_config.yaml");
    voxtrain::config::save_config(&best_config(&study, &cfg)?, &best_path)?;
    let failed = study.trials.iter().filter(|t| t.objective.is_none()).count();
    let mut out = format!("best trial {}: {} = {:.6}\n", best.index, s.experiment.metric, best.objective.unwrap_or(f64::NAN));
    for (k, v) in &best.assignment {
        let _ = writeln!(out, "  {k} = {}", serde_yaml::to_string(v).unwrap_or_default().trim());
    }
    let _ = write!(out, "{} trials, {failed} failed; study log {}; best config {}", study.trials.len(), root.join("study.log").display(), best_path.display());
    Ok(out)
}

/// A directory with `fold_<k>` children, or the only `trial_<t>` below `dir`.
fn trial_dir(dir: &Path) -> PathBuf {
    let children: Vec<PathBuf> = fs::read_dir(dir).into_iter().flatten().flatten().map(|e| e.path()).collect();
    let named = |prefix: &str| children.iter().filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix))).cloned().collect::<Vec<_>>();
    let trials = named("trial_");
    if named("fold_").is_empty() && trials.len() == 1 {
        trials[0].clone()
    } else {
        dir.to_path_buf()
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn cmd_test(a: &TestArgs) -> Result<String, Error> {
    let mut cfg = load(&a.config, None)?;
    if let Some(root) = &a.data_root {
        cfg.set("data.data_root", path_value(root)?)?;
    }
    if let Some(csv) = &a.csv {
        cfg.set("data.csv_path", path_value(csv)?)?;
    }
    let s = cfg.settings()?;
    let manifest = load_manifest(&DataContract::from_settings(&s))?;
    let test = test_cohort(&manifest)?;
    let ev = evaluate_test(&trial_dir(&a.run_dir), &test)?;
    let mut out = String::new();
    for c in ev.folds.iter().chain(std::iter::once(&ev.ensemble)) {
        let name = c.fold.map_or("ensemble".to_string(), |k| format!("fold {k}"));
        for r in &c.reports {
            let metrics: Vec<String> = s.evaluation.metrics.iter().filter_map(|m| r.values.get(m).copied().flatten().map(|v| format!("{m}={}", fmt_metric(Some(v))))).collect();
            let _ = writeln!(out, "{name} {}: {}", r.endpoint, metrics.join(" "));
        }
    }
    for (k, e) in &ev.skipped {
        let _ = writeln!(out, "fold {k} skipped: {e}");
    }
    let _ = write!(out, "reports: {}", ev.ensemble.dir.parent().unwrap_or(Path::new("")).display());
    Ok(out)
}

pub fn cmd_validate_data(a: &ValidateArgs) -> CommandResult {
    let cfg = match load(&a.config, None).and_then(|c| Ok(c.settings()?)) {
        Ok(s) => s,
        Err(e) => return CommandResult { exit_code: e.exit_code(), summary: format!("error: {e}") },
    };
    let contract = DataContract::from_settings(&cfg);
    let problems = validate_data(&contract);
    if problems.is_empty() {
        let n = load_manifest(&contract).map(|m| m.len()).unwrap_or(0);
        return CommandResult { exit_code: 0, summary: format!("data contract satisfied: {n} patients") };
    }
    let mut summary = format!("{} data contract violation(s):", problems.len());
    for p in &problems {
        let _ = write!(summary, "\n  {p}");
    }
    CommandResult { exit_code: EXIT_DATA, summary }
}

pub fn cmd_make_synthetic(a: &SyntheticArgs) -> Result<String, Error> {
    let [h, w, d] = a.shape[..] else {
        return Err(Error::Usage(format!("--shape needs three sizes, got {}", a.shape.len())));
    };
    if a.n < 2 {
        return Err(Error::Usage("--n must be at least 2".into()));
    }
    if a.out.join("clinical.csv").exists() {
        if !a.overwrite {
            return Err(Error::Usage(format!("{} already holds a dataset; pass --overwrite to replace it", a.out.display())));
        }
        remove_dir(&a.out)?;
    }
    let config = make_synthetic(&a.out, &SyntheticSpec { n: a.n, shape: [h, w, d], seed: a.seed, ..Default::default() })?;
    Ok(format!("wrote {} patients to {}; config {}", a.n, a.out.display(), config.display()))
}

