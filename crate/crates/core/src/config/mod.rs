//! Layered YAML configuration.
//!
//! A [`Config`] is an untyped YAML mapping. Project files are merged onto the
//! embedded defaults ([`base_config`]) key by key; lists and scalars replace,
//! mappings merge recursively, and keys absent from the defaults are rejected.
//! [`Config::settings`] converts the merged tree into typed [`Settings`] and
//! checks every invariant, reporting all violations at once.

mod settings;

use std::fmt;
use std::path::{Path, PathBuf};

use serde_yaml::{Mapping, Value};
use thiserror::Error;

pub use settings::*;

const BASE_CONFIG: &str = include_str!("base_config.yaml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config{}: {message}{}", .path.as_ref().map(|p| format!(" {}", p.display())).unwrap_or_default(), .location.map(|(l, c)| format!(" at line {l}, column {c}")).unwrap_or_default())]
    Parse { path: Option<PathBuf>, location: Option<(usize, usize)>, message: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{path}' must be {expected}, found {found}")]
    TypeMismatch { path: String, expected: &'static str, found: &'static str },
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config(Value);

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Mapping(_) => "a mapping",
        Value::Sequence(_) => "a list",
        Value::Null => "null",
        Value::Tagged(_) => "a tagged value",
        _ => "a scalar",
    }
}

fn join(prefix: &str, key: &Value) -> String {
    let k = match key {
        Value::String(s) => s.clone(),
        other => serde_yaml::to_string(other).unwrap_or_default().trim().to_string(),
    };
    if prefix.is_empty() {
        k
    } else {
        format!("{prefix}.{k}")
    }
}

fn merge_values(base: &Value, over: &Value, path: &str) -> Result<Value, ConfigError> {
    match (base, over) {
        (Value::Mapping(b), Value::Mapping(o)) => {
            let mut out = b.clone();
            for (k, v) in o {
                let child = join(path, k);
                let Some(bv) = b.get(k) else {
                    return Err(ConfigError::UnknownKey(child));
                };
                out.insert(k.clone(), merge_values(bv, v, &child)?);
            }
            Ok(Value::Mapping(out))
        }
        (Value::Mapping(_), other) => Err(ConfigError::TypeMismatch { path: path.to_string(), expected: "a mapping", found: kind(other) }),
        (_, Value::Mapping(_)) => Err(ConfigError::TypeMismatch { path: path.to_string(), expected: kind(base), found: "a mapping" }),
        (_, v) => Ok(v.clone()),
    }
}

pub fn base_config() -> Config {
    Config::from_yaml_str(BASE_CONFIG).expect("embedded defaults parse")
}

/// Recursively applies `over` on top of `base`; neither input is modified.
pub fn merge(base: &Config, over: &Config) -> Result<Config, ConfigError> {
    merge_values(&base.0, &over.0, "").map(Config)
}

/// Reads a config file, merges it onto the defaults and validates the result.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let file = Config::from_yaml_str(&text).map_err(|e| match e {
        ConfigError::Parse { location, message, .. } => ConfigError::Parse { path: Some(path.to_path_buf()), location, message },
        other => other,
    })?;
    let cfg = merge(&base_config(), &file)?;
    cfg.settings()?;
    Ok(cfg)
}

pub fn save_config(cfg: &Config, path: &Path) -> Result<(), ConfigError> {
    std::fs::write(path, cfg.to_yaml_string()).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

impl Config {
    pub fn empty() -> Self {
        Config(Value::Mapping(Mapping::new()))
    }

    pub fn from_yaml_str(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_yaml::from_str(text).map_err(|e| ConfigError::Parse {
            path: None,
            location: e.location().map(|l| (l.line(), l.column())),
            message: e.to_string(),
        })?;
        match value {
            Value::Null => Ok(Self::empty()),
            Value::Mapping(_) => Ok(Config(value)),
            other => Err(ConfigError::Parse { path: None, location: None, message: format!("top level must be a mapping, found {}", kind(&other)) }),
        }
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(&self.0).expect("config values serialize")
    }

    pub fn value(&self) -> &Value {
        &self.0
    }

    /// Looks up a dotted path such as `training.optimizer.lr`.
    pub fn get(&self, path: &str) -> Option<&Value> {
        path.split('.').try_fold(&self.0, |v, key| v.as_mapping()?.get(key))
    }

    /// An override containing only `path = value`.
    pub fn single(path: &str, value: Value) -> Self {
        let v = path.rsplit('.').fold(value, |acc, key| {
            let mut m = Mapping::new();
            m.insert(Value::String(key.to_string()), acc);
            Value::Mapping(m)
        });
        Config(v)
    }

    /// Replaces the value at an existing dotted path.
    pub fn set(&mut self, path: &str, value: Value) -> Result<(), ConfigError> {
        *self = merge(self, &Config::single(path, value))?;
        Ok(())
    }

    pub fn settings(&self) -> Result<Settings, ConfigError> {
        Settings::from_config(self)
    }

    /// Makes relative data, output and cache paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<(), ConfigError> {
        for key in ["data.csv_path", "data.data_root", "dataset.cache_dir", "output_dir"] {
            if let Some(Value::String(p)) = self.get(key) {
                let p = Path::new(p);
                if p.is_relative() {
                    let abs = base.join(p);
                    self.set(key, Value::String(abs.to_string_lossy().into_owned()))?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_yaml_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(s: &str) -> Config {
        Config::from_yaml_str(s).unwrap()
    }

    #[test]
    fn defaults_select_resnet10_and_validate() {
        let base = base_config();
        assert_eq!(base.get("model.architecture").unwrap().as_str(), Some("resnet"));
        assert_eq!(base.get("model.size").unwrap().as_u64(), Some(10));
        let s = base.settings().unwrap();
        assert!(s.training.k >= 2);
    }

    #[test]
    fn override_takes_precedence_and_base_is_untouched() {
        let base = cfg("lr: 0.001\nK: 5\n");
        let merged = merge(&base, &cfg("K: 3\n")).unwrap();
        assert_eq!(merged, cfg("lr: 0.001\nK: 3\n"));
        assert_eq!(base, cfg("lr: 0.001\nK: 5\n"));
        assert_eq!(merge(&base, &Config::empty()).unwrap(), base);
    }

    #[test]
    fn typos_and_shape_changes_are_rejected() {
        let base = base_config();
        let err = merge(&base, &cfg("modle: {architecture: vit}\n")).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "modle"));
        let err = merge(&base, &cfg("model: {output: {dropuot: 0.1}}\n")).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "model.output.dropuot"));
        assert!(matches!(merge(&base, &cfg("model: resnet\n")), Err(ConfigError::TypeMismatch { .. })));
        assert!(matches!(merge(&base, &cfg("seed: {a: 1}\n")), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(merge(&base, &cfg("training: {seed: {a: 1}}\n")), Err(ConfigError::TypeMismatch { .. })));
    }

    #[test]
    fn lists_replace_wholesale() {
        let base = cfg("xs: [1, 2, 3]\n");
        assert_eq!(merge(&base, &cfg("xs: [9]\n")).unwrap(), cfg("xs: [9]\n"));
    }

    #[test]
    fn single_path_override_and_set() {
        let mut c = base_config();
        c.set("training.optimizer.lr", Value::from(0.01)).unwrap();
        assert_eq!(c.get("training.optimizer.lr").unwrap().as_f64(), Some(0.01));
        assert!(c.set("training.optimiser.lr", Value::from(0.01)).is_err());
    }

    #[test]
    fn parse_errors_carry_a_location() {
        let err = Config::from_yaml_str("a: [1, 2\nb: 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { location: Some(_), .. }));
    }
}
