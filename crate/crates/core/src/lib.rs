//! Config-driven K-fold training, hyperparameter search and evaluation for
//! volumetric medical-image models with optional tabular inputs.
//!
//! Standard mode is two calls:
//!
//! ```no_run
//! let cfg = voxtrain::config::load_config(std::path::Path::new("config.yaml")).unwrap();
//! let folds = voxtrain::training::run_standard(&cfg).unwrap();
//! ```

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod hpo;
pub mod manifest;
pub mod synthetic;
pub mod training;
pub mod transforms;
pub mod volume_io;

pub use error::Error;
