#![allow(dead_code)]

use std::path::Path;

use serde_yaml::Value;
use voxtrain::config::{load_config, merge, Config};
use voxtrain::synthetic::{make_synthetic, SyntheticSpec};

/// Small, fast overrides on top of the synthetic cohort's config.
pub const TINY: &str = "
dataset: {strategy: standard, batch_size: 4}
model:
  architecture: cnn
  cnn: {widths: [4, 8]}
  output: {shared_sizes: [8], endpoint_sizes: [4], dropout: 0.0}
training: {K: 3, epochs: 3, early_stopping: {patience: 0}}
";

/// Writes a synthetic cohort under `dir/data` and returns its config with
/// absolute paths, `TINY` and `extra` applied, and outputs under `dir/runs`.
pub fn synthetic_config(dir: &Path, n: usize, extra: &str) -> Config {
    let data = dir.join("data");
    let path = make_synthetic(&data, &SyntheticSpec { n, shape: [8, 8, 8], seed: 3, test_fraction: 0.25 }).unwrap();
    let mut cfg = load_config(&path).unwrap();
    cfg.resolve_paths(&data).unwrap();
    for layer in [TINY, extra] {
        cfg = merge(&cfg, &Config::from_yaml_str(layer).unwrap()).unwrap();
    }
    set_output(&mut cfg, &dir.join("runs"));
    cfg.settings().unwrap();
    cfg
}

pub fn set_output(cfg: &mut Config, out: &Path) {
    cfg.set("output_dir", Value::String(out.to_string_lossy().into_owned())).unwrap();
}
