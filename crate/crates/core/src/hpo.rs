//! Hyperparameter search: each trial runs a full K-fold cross-validation on
//! a sampled assignment and reports the aggregated fold objective.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use thiserror::Error;

use crate::config::{merge, Aggregate, Config, ConfigError, Direction, SamplerName, SearchDomain, SearchParam};
use crate::training::engine::{make_tracker, run_root, run_trial};

#[derive(Debug, Error)]
pub enum HpoError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("every trial failed")]
    AllTrialsFailed,
    #[error("the study has no complete trial")]
    NoCompleteTrial,
    #[error("{path}: {message}")]
    Study { path: PathBuf, message: String },
}

/// Config path to sampled value.
pub type Assignment = BTreeMap<String, Value>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialState {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub assignment: Assignment,
    pub fold_objectives: Vec<Option<f64>>,
    pub objective: Option<f64>,
    pub state: TrialState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trials of one experiment, persisted as a line-delimited log where the last
/// record for an index supersedes earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub trials: Vec<Trial>,
    pub direction: Direction,
    pub path: Option<PathBuf>,
}

fn better(direction: Direction, a: f64, b: f64) -> bool {
    match direction {
        Direction::Maximize => a > b,
        Direction::Minimize => a < b,
    }
}

impl Study {
    pub fn new(direction: Direction) -> Self {
        Self { trials: Vec::new(), direction, path: None }
    }

    /// Opens the log at `path`, starting empty when it does not exist.
    pub fn open(path: &Path, direction: Direction) -> Result<Self, HpoError> {
        let mut study = Self { path: Some(path.to_path_buf()), ..Self::new(direction) };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(study),
            Err(e) => return Err(HpoError::Study { path: path.to_path_buf(), message: e.to_string() }),
        };
        let mut latest: BTreeMap<usize, Trial> = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let t: Trial = serde_json::from_str(line).map_err(|e| HpoError::Study { path: path.to_path_buf(), message: format!("line {}: {e}", n + 1) })?;
            latest.insert(t.index, t);
        }
        study.trials = latest.into_values().collect();
        Ok(study)
    }

    pub fn get(&self, index: usize) -> Option<&Trial> {
        self.trials.iter().find(|t| t.index == index)
    }

    /// Inserts or replaces a trial and appends it to the log under an exclusive lock.
    pub fn record(&mut self, trial: Trial) -> Result<(), HpoError> {
        if let Some(path) = &self.path {
            let err = |e: std::io::Error| HpoError::Study { path: path.clone(), message: e.to_string() };
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(err)?;
            }
            let f: File = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
            f.lock().map_err(err)?;
            let mut line = serde_json::to_string(&trial).expect("trial serializes");
            line.push('\n');
            (&f).write_all(line.as_bytes()).map_err(err)?;
            f.unlock().map_err(err)?;
        }
        match self.trials.iter_mut().find(|t| t.index == trial.index) {
            Some(slot) => *slot = trial,
            None => {
                self.trials.push(trial);
                self.trials.sort_by_key(|t| t.index);
            }
        }
        Ok(())
    }

    /// Best complete trial; ties go to the lower index.
    pub fn best(&self) -> Option<&Trial> {
        let mut best: Option<&Trial> = None;
        for t in self.trials.iter().filter(|t| t.state == TrialState::Complete) {
            let Some(v) = t.objective else { continue };
            if best.is_none_or(|b| better(self.direction, v, b.objective.expect("complete trials have objectives"))) {
                best = Some(t);
            }
        }
        best
    }

    /// The log as it would be written from scratch.
    pub fn to_log(&self) -> String {
        self.trials.iter().map(|t| serde_json::to_string(t).expect("trial serializes") + "\n").collect()
    }
}

/// Config with the assignment applied on top.
pub fn apply_assignment(base: &Config, assignment: &Assignment) -> Result<Config, ConfigError> {
    assignment.iter().try_fold(base.clone(), |cfg, (path, v)| merge(&cfg, &Config::single(path, v.clone())))
}

/// Base config merged with the best trial's assignment.
pub fn best_config(study: &Study, base: &Config) -> Result<Config, HpoError> {
    let best = study.best().ok_or(HpoError::NoCompleteTrial)?;
    Ok(apply_assignment(base, &best.assignment)?)
}

pub fn aggregate(values: &[Option<f64>], how: Aggregate) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    Some(match how {
        Aggregate::Mean => v.iter().sum::<f64>() / v.len() as f64,
        Aggregate::Median => {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        }
    })
}

/// Numeric domain in sampling space: log-scaled ranges are sampled in ln.
fn bounds(d: &SearchDomain) -> Option<(f64, f64, bool)> {
    match *d {
        SearchDomain::Float { low, high, log } => Some(if log { (low.ln(), high.ln(), true) } else { (low, high, false) }),
        SearchDomain::Int { low, high, log } => Some(if log {
            ((low as f64).ln(), (high as f64 + 1.0).ln(), true)
        } else {
            (low as f64 - 0.5, high as f64 + 0.5, false)
        }),
        SearchDomain::Categorical { .. } => None,
    }
}

fn to_value(d: &SearchDomain, u: f64) -> Value {
    match *d {
        SearchDomain::Float { low, high, log } => Value::from((if log { u.exp() } else { u }).clamp(low, high)),
        SearchDomain::Int { low, high, log } => {
            let x = if log { u.exp().floor() } else { u.round() };
            Value::from((x as i64).clamp(low, high))
        }
        SearchDomain::Categorical { .. } => unreachable!("categorical values are drawn directly"),
    }
}

fn from_value(d: &SearchDomain, v: &Value) -> Option<f64> {
    let (_, _, log) = bounds(d)?;
    let x = v.as_f64()?;
    Some(if log { x.ln() } else { x })
}

fn sample_random(p: &SearchParam, rng: &mut impl Rng) -> Value {
    match &p.domain {
        SearchDomain::Categorical { choices } => choices.choose(rng).expect("validated non-empty").clone(),
        d => {
            let (lo, hi, _) = bounds(d).expect("numeric domain");
            to_value(d, if hi > lo { rng.gen_range(lo..hi) } else { lo })
        }
    }
}

/// Uniform sample over every domain.
pub fn sample_assignment(space: &[SearchParam], rng: &mut impl Rng) -> Assignment {
    space.iter().map(|p| (p.path.clone(), sample_random(p, rng))).collect()
}

const TPE_STARTUP: usize = 10;
const TPE_CANDIDATES: usize = 24;
const TPE_GAMMA: f64 = 0.25;

/// Silverman bandwidth, floored at 1% of the range.
fn bandwidth(obs: &[f64], lo: f64, hi: f64) -> f64 {
    let n = obs.len().max(1) as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let sd = (obs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (1.06 * sd * n.powf(-0.2)).max((hi - lo) * 0.01)
}

/// Parzen density with a uniform prior component on [lo, hi].
fn parzen(x: f64, obs: &[f64], lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    let sigma = bandwidth(obs, lo, hi);
    let prior = 1.0 / width;
    let kernels: f64 = obs.iter().map(|&m| (-(x - m).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())).sum();
    (prior + kernels) / (obs.len() as f64 + 1.0)
}

fn draw_parzen(obs: &[f64], lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    let pick = rng.gen_range(0..=obs.len());
    if pick == obs.len() {
        return rng.gen_range(lo..hi);
    }
    let sigma = bandwidth(obs, lo, hi);
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    (obs[pick] + sigma * z).clamp(lo, hi)
}

/// Tree-structured Parzen estimator: each parameter independently maximizes
/// l(x) / g(x), where l and g model the best quarter and the rest of the
/// complete trials. Falls back to uniform sampling for the first trials.
pub fn sample_tpe(space: &[SearchParam], history: &[Trial], direction: Direction, rng: &mut impl Rng) -> Assignment {
    let mut done: Vec<&Trial> = history.iter().filter(|t| t.state == TrialState::Complete && t.objective.is_some()).collect();
    if done.len() < TPE_STARTUP {
        return sample_assignment(space, rng);
    }
    done.sort_by(|a, b| {
        let (x, y) = (a.objective.unwrap(), b.objective.unwrap());
        match direction {
            Direction::Maximize => y.total_cmp(&x),
            Direction::Minimize => x.total_cmp(&y),
        }
    });
    let n_good = ((TPE_GAMMA * done.len() as f64).ceil() as usize).max(1);
    let (good, bad) = done.split_at(n_good);
    let mut out = Assignment::new();
    for p in space {
        let value = match &p.domain {
            SearchDomain::Categorical { choices } => {
                let weight = |set: &[&Trial], c: &Value| (set.iter().filter(|t| t.assignment.get(&p.path) == Some(c)).count() as f64 + 1.0) / (set.len() + choices.len()) as f64;
                let lw: Vec<f64> = choices.iter().map(|c| weight(good, c)).collect();
                let mut best = (f64::NEG_INFINITY, 0);
                for _ in 0..TPE_CANDIDATES {
                    let i = rand_distr::WeightedIndex::new(&lw).map(|w| rng.sample(w)).unwrap_or(0);
                    let score = lw[i] / weight(bad, &choices[i]);
                    if score > best.0 {
                        best = (score, i);
                    }
                }
                choices[best.1].clone()
            }
            d => {
                let (lo, hi, _) = bounds(d).expect("numeric domain");
                let obs = |set: &[&Trial]| -> Vec<f64> { set.iter().filter_map(|t| from_value(d, t.assignment.get(&p.path)?)).collect() };
                let (g, b) = (obs(good), obs(bad));
                let mut best = (f64::NEG_INFINITY, lo);
                for _ in 0..TPE_CANDIDATES {
                    let x = draw_parzen(&g, lo, hi, rng);
                    let score = parzen(x, &g, lo, hi) / parzen(x, &b, lo, hi);
                    if score > best.0 {
                        best = (score, x);
                    }
                }
                to_value(d, best.1)
            }
        };
        out.insert(p.path.clone(), value);
    }
    out
}

/// Runs trials `0..n_trials`, skipping those the study already finished.
/// Trials left `running` by an interrupted run are re-run with their stored
/// assignment. `objective` returns one value per trained fold.
pub fn run_experiment_with<F>(cfg: &Config, n_trials: usize, direction: Direction, study: &mut Study, mut objective: F) -> Result<(), HpoError>
where
    F: FnMut(&Config, usize) -> Result<Vec<Option<f64>>, String>,
{
    let s = cfg.settings()?;
    let x = &s.experiment;
    study.direction = direction;
    for index in 0..n_trials {
        let previous = study.get(index).cloned();
        if previous.as_ref().is_some_and(|t| t.state != TrialState::Running) {
            continue;
        }
        let assignment = match previous {
            Some(t) => t.assignment,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(s.training.seed);
                rng.set_stream(index as u64);
                match x.sampler {
                    SamplerName::Random => sample_assignment(&x.search_space, &mut rng),
                    SamplerName::Tpe => sample_tpe(&x.search_space, &study.trials, direction, &mut rng),
                }
            }
        };
        let mut trial = Trial { index, assignment, fold_objectives: Vec::new(), objective: None, state: TrialState::Running, error: None };
        study.record(trial.clone())?;
        let outcome = apply_assignment(cfg, &trial.assignment)
            .and_then(|c| c.settings().map(|_| c))
            .map_err(|e| e.to_string())
            .and_then(|c| objective(&c, index));
        match outcome {
            Ok(folds) => {
                trial.objective = aggregate(&folds, x.aggregate);
                trial.fold_objectives = folds;
                if trial.objective.is_some() {
                    trial.state = TrialState::Complete;
                } else {
                    trial.state = TrialState::Failed;
                    trial.error = Some(format!("metric '{}' is undefined on every fold", x.metric));
                }
            }
            Err(e) => {
                log::warn!("trial {index} failed: {e}");
                trial.state = TrialState::Failed;
                trial.error = Some(e);
            }
        }
        study.record(trial)?;
    }
    if study.best().is_none() {
        return Err(HpoError::AllTrialsFailed);
    }
    Ok(())
}

pub fn study_path(cfg: &Config) -> Result<PathBuf, HpoError> {
    Ok(run_root(&cfg.settings()?).join("study.log"))
}

/// Experiment mode with K-fold training per trial, persisted to
/// `<out>/<experiment>/study.log`.
pub fn run_experiment(cfg: &Config, n_trials: usize, direction: Direction) -> Result<Study, HpoError> {
    let s = cfg.settings()?;
    let mut study = Study::open(&study_path(cfg)?, direction)?;
    let metric = s.experiment.metric.clone();
    run_experiment_with(cfg, n_trials, direction, &mut study, |c, index| {
        let tracker = make_tracker(&c.settings().map_err(|e| e.to_string())?, index);
        let folds = run_trial(c, index, tracker.as_ref()).map_err(|e| e.to_string())?;
        Ok(folds.iter().map(|f| f.objective(&metric)).collect())
    })?;
    Ok(study)
}
