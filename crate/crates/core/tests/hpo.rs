use std::fs;

use serde_yaml::Value;
use voxtrain::config::{base_config, merge, Config, Direction};
use voxtrain::hpo::{run_experiment_with, Assignment, Study, TrialState};

fn cfg(sampler: &str) -> Config {
    let text = format!(
        "experiment:
  sampler: {sampler}
  search_space:
    - {{path: training.optimizer.lr, type: float, low: 1.0e-4, high: 1.0e-1, log: true}}
    - {{path: training.epochs, type: int, low: 1, high: 50}}
    - {{path: training.optimizer.name, type: categorical, choices: [adam, sgd, adamw]}}
"
    );
    merge(&base_config(), &Config::from_yaml_str(&text).unwrap()).unwrap()
}

/// Deterministic stand-in for a K-fold run, read back from the trial config.
fn score(c: &Config) -> Vec<Option<f64>> {
    let s = c.settings().unwrap();
    let opt = &s.training.optimizer;
    let bonus = match c.get("training.optimizer.name").and_then(Value::as_str) {
        Some("sgd") => 0.3,
        Some("adamw") => 0.1,
        _ => 0.0,
    };
    let base = -(opt.lr.log10() + 2.0).powi(2) - ((s.training.epochs as f64 - 20.0) / 10.0).powi(2) + bonus;
    vec![Some(base), Some(base + 0.5), Some(base - 0.5)]
}

fn brute_force(assignments: &[Assignment], direction: Direction) -> usize {
    let base = cfg("random");
    let values: Vec<f64> = assignments
        .iter()
        .map(|a| {
            let mut c = base.clone();
            for (k, v) in a {
                c.set(k, v.clone()).unwrap();
            }
            score(&c)[0].unwrap()
        })
        .collect();
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        let better = match direction {
            Direction::Maximize => v > values[best],
            Direction::Minimize => v < values[best],
        };
        if better {
            best = i;
        }
    }
    best
}

#[test]
fn best_trial_is_the_brute_force_optimum() {
    for direction in [Direction::Maximize, Direction::Minimize] {
        let mut study = Study::new(direction);
        run_experiment_with(&cfg("random"), 30, direction, &mut study, |c, _| Ok(score(c))).unwrap();
        assert_eq!(study.trials.len(), 30);
        let assignments: Vec<Assignment> = study.trials.iter().map(|t| t.assignment.clone()).collect();
        assert_eq!(study.best().unwrap().index, brute_force(&assignments, direction));
    }
}

#[test]
fn interrupted_study_resumes_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("tpe");

    let whole = dir.path().join("whole.log");
    let mut reference = Study::open(&whole, Direction::Maximize).unwrap();
    run_experiment_with(&c, 14, Direction::Maximize, &mut reference, |c, _| Ok(score(c))).unwrap();

    // Crash inside trial 9: its `running` record is the last line written.
    let part = dir.path().join("part.log");
    let crash = std::panic::catch_unwind(|| {
        let mut study = Study::open(&part, Direction::Maximize).unwrap();
        let _ = run_experiment_with(&c, 14, Direction::Maximize, &mut study, |c, i| {
            assert_ne!(i, 9, "simulated crash");
            Ok(score(c))
        });
    });
    assert!(crash.is_err());
    let mut study = Study::open(&part, Direction::Maximize).unwrap();
    assert_eq!(study.trials.len(), 10);
    assert_eq!(study.get(9).unwrap().state, TrialState::Running);
    assert_eq!(study.get(9).unwrap().assignment, reference.get(9).unwrap().assignment);

    let mut calls = Vec::new();
    run_experiment_with(&c, 14, Direction::Maximize, &mut study, |c, i| {
        calls.push(i);
        Ok(score(c))
    })
    .unwrap();
    assert_eq!(calls, (9..14).collect::<Vec<_>>());
    assert_eq!(study.trials, reference.trials);

    let reopened = Study::open(&part, Direction::Maximize).unwrap();
    assert_eq!(reopened.trials, reference.trials);
    assert_eq!(reopened.to_log(), reference.to_log());
    let rewritten = dir.path().join("rewritten.log");
    fs::write(&rewritten, reopened.to_log()).unwrap();
    assert_eq!(Study::open(&rewritten, Direction::Maximize).unwrap().to_log(), reopened.to_log());
}
