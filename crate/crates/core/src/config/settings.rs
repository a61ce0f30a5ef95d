use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer};
use serde_yaml::Value;
use voxtrain_models::{Architecture, EncoderSpec, EndpointKind, EndpointSpec, OutputSpec, VitSpec};

use super::{Config, ConfigError};

/// Metrics that can be computed per endpoint; `true` when larger is better.
pub const METRICS: &[(&str, bool)] = &[
    ("auc", true),
    ("accuracy", true),
    ("f1", true),
    ("precision", true),
    ("recall", true),
    ("specificity", true),
    ("ece", false),
    ("mce", false),
    ("ace", false),
    ("brier", false),
    ("c_index", true),
];

pub const VISUALISATIONS: &[&str] = &["calibration", "reliability", "confusion", "roc", "kaplan_meier"];

pub fn metric_higher_is_better(name: &str) -> Option<bool> {
    if name == "loss" {
        return Some(false);
    }
    METRICS.iter().find(|(m, _)| *m == name).map(|(_, hi)| *hi)
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("expected a string or number, found {other:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Binary,
    Event,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub kind: LabelKind,
    #[serde(default)]
    pub unit: String,
}

impl LabelSpec {
    pub fn binary(name: &str) -> Self {
        Self { name: name.into(), kind: LabelKind::Binary, unit: String::new() }
    }

    pub fn event(name: &str, unit: &str) -> Self {
        Self { name: name.into(), kind: LabelKind::Event, unit: unit.into() }
    }

    /// CSV columns holding this label: `name`, or `name_event` and `name_unit`.
    pub fn columns(&self) -> Vec<String> {
        match self.kind {
            LabelKind::Binary => vec![self.name.clone()],
            LabelKind::Event => vec![format!("{}_event", self.name), format!("{}_{}", self.name, self.unit)],
        }
    }

    pub fn endpoint(&self) -> EndpointSpec {
        let kind = match self.kind {
            LabelKind::Binary => EndpointKind::Binary,
            LabelKind::Event => EndpointKind::Event,
        };
        EndpointSpec::new(&self.name, kind)
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct DataSettings {
    pub csv_path: PathBuf,
    pub data_root: PathBuf,
    pub modalities: Vec<String>,
    pub tabular_features: Vec<String>,
    pub labels: Vec<LabelSpec>,
    #[serde(deserialize_with = "string_or_number")]
    pub missing_indicator: String,
    pub stratify_on: Vec<String>,
}

impl DataSettings {
    /// Stratification columns, defaulting to every binary label and event indicator.
    pub fn strat_columns(&self) -> Vec<String> {
        if !self.stratify_on.is_empty() {
            return self.stratify_on.clone();
        }
        self.labels.iter().map(|l| l.columns()[0].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ClipNormalizeSpec {
    pub modality: String,
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ValueMapEntry {
    pub from: f64,
    pub to: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ValueMapSpec {
    pub modality: String,
    pub mapping: Vec<ValueMapEntry>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct PreprocessingSettings {
    pub clip_normalize: Vec<ClipNormalizeSpec>,
    pub value_map: Vec<ValueMapSpec>,
    pub crop_size: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct FlipSettings {
    pub enabled: bool,
    pub p: f64,
    pub axes: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct AffineSettings {
    pub enabled: bool,
    pub p: f64,
    pub translate: f64,
    pub scale: f64,
    pub shear: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct RotateSettings {
    pub enabled: bool,
    pub p: f64,
    pub max_degrees: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct NoiseSettings {
    pub enabled: bool,
    pub p: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct MixupSettings {
    pub enabled: bool,
    pub alpha: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct AugmentationSettings {
    pub enabled: bool,
    pub random_crop: Vec<usize>,
    pub flip: FlipSettings,
    pub affine: AffineSettings,
    pub rotate: RotateSettings,
    pub gaussian_noise: NoiseSettings,
    pub mixup: MixupSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheKind {
    Standard,
    Cache,
    Smartcache,
    Persistent,
}

#[derive(Clone, Debug, Deserialize)]
pub struct DatasetSettings {
    pub strategy: CacheKind,
    pub cache_fraction: f64,
    pub replace_rate: f64,
    pub cache_dir: PathBuf,
    pub batch_size: usize,
    pub num_workers: usize,
}

#[derive(Clone, Debug, Deserialize)]
pub struct CnnSettings {
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct VitSettings {
    pub patch_size: Vec<usize>,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl VitSettings {
    fn spec(&self) -> VitSpec {
        let p = |i: usize| self.patch_size.get(i).or(self.patch_size.first()).copied().unwrap_or(0);
        VitSpec { patch_size: [p(0), p(1), p(2)], hidden: self.hidden, depth: self.depth, heads: self.heads, mlp_dim: self.mlp_dim }
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct TransRpSettings {
    pub backbone: String,
    #[serde(deserialize_with = "string_or_number")]
    pub size: String,
    pub vit: VitSettings,
}

#[derive(Clone, Debug, Deserialize)]
pub struct OutputSettings {
    pub n_shared_layers: usize,
    pub shared_sizes: Vec<usize>,
    pub n_endpoint_layers: usize,
    pub endpoint_sizes: Vec<usize>,
    pub n_clinical_layers: usize,
    pub clinical_sizes: Vec<usize>,
    pub clinical_concat_position: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct ModelSettings {
    pub architecture: String,
    #[serde(deserialize_with = "string_or_number")]
    pub size: String,
    pub cnn: CnnSettings,
    pub vit: VitSettings,
    pub transrp: TransRpSettings,
    pub output: OutputSettings,
}

#[derive(Clone, Debug, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub monitor: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLoss {
    Bce,
    Focal,
    Asl,
    Hill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    InverseFrequency,
}

#[derive(Clone, Debug, Deserialize)]
pub struct LossSettings {
    pub binary: BinaryLoss,
    pub focal_gamma: f64,
    pub asl_gamma_pos: f64,
    pub asl_gamma_neg: f64,
    pub asl_clip: f64,
    pub hill_lambda: f64,
    pub hill_margin: f64,
    pub hill_gamma: f64,
    pub class_weighting: ClassWeighting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Adamw,
    Adabound,
    Sgd,
}

#[derive(Clone, Debug, Deserialize)]
pub struct OptimizerSettings {
    pub name: OptimizerName,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub final_lr: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerName {
    Cosine,
    Step,
    Plateau,
    None,
}

#[derive(Clone, Debug, Deserialize)]
pub struct SchedulerSettings {
    pub name: SchedulerName,
    pub step_size: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct TrainingSettings {
    #[serde(rename = "K")]
    pub k: usize,
    pub folds_to_run: Vec<usize>,
    pub epochs: usize,
    pub early_stopping: EarlyStopping,
    pub loss: LossSettings,
    pub optimizer: OptimizerSettings,
    pub scheduler: SchedulerSettings,
    pub seed: u64,
    pub save_weights: bool,
}

impl TrainingSettings {
    /// Folds to train, in ascending order; an empty list selects all `K`.
    pub fn folds(&self) -> Vec<usize> {
        if self.folds_to_run.is_empty() {
            (0..self.k).collect()
        } else {
            let mut f = self.folds_to_run.clone();
            f.sort_unstable();
            f.dedup();
            f
        }
    }

    /// Metric name behind `early_stopping.monitor` and whether higher is better.
    pub fn monitor(&self) -> (String, bool) {
        let name = self.early_stopping.monitor.trim_start_matches("val_").to_string();
        let hi = metric_higher_is_better(&name).unwrap_or(false);
        (name, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Median,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerName {
    Random,
    Tpe,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SearchDomain {
    Float {
        low: f64,
        high: f64,
        #[serde(default)]
        log: bool,
    },
    Int {
        low: i64,
        high: i64,
        #[serde(default)]
        log: bool,
    },
    Categorical {
        choices: Vec<Value>,
    },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SearchParam {
    pub path: String,
    #[serde(flatten)]
    pub domain: SearchDomain,
}

#[derive(Clone, Debug, Deserialize)]
pub struct ExperimentSettings {
    pub n_trials: usize,
    pub direction: Direction,
    pub metric: String,
    pub aggregate: Aggregate,
    pub sampler: SamplerName,
    pub search_space: Vec<SearchParam>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Youden,
    Fixed(f64),
}

fn threshold<'de, D: Deserializer<'de>>(d: D) -> Result<Threshold, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) if s == "youden" => Ok(Threshold::Youden),
        Value::Number(n) => n.as_f64().map(Threshold::Fixed).ok_or_else(|| serde::de::Error::custom("threshold must be finite")),
        other => Err(serde::de::Error::custom(format!("threshold must be 'youden' or a number, found {other:?}"))),
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct EvaluationSettings {
    pub metrics: Vec<String>,
    pub visualisations: Vec<String>,
    pub n_bins: usize,
    #[serde(deserialize_with = "threshold")]
    pub threshold: Threshold,
    pub km_groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackingBackend {
    Jsonl,
    None,
}

#[derive(Clone, Debug, Deserialize)]
pub struct TrackingSettings {
    pub backend: TrackingBackend,
}

/// Typed, validated view of a merged [`Config`].
#[derive(Clone, Debug, Deserialize)]
pub struct Settings {
    pub experiment_name: String,
    pub output_dir: PathBuf,
    pub data: DataSettings,
    pub preprocessing: PreprocessingSettings,
    pub augmentation: AugmentationSettings,
    pub dataset: DatasetSettings,
    pub model: ModelSettings,
    pub training: TrainingSettings,
    pub experiment: ExperimentSettings,
    pub evaluation: EvaluationSettings,
    pub tracking: TrackingSettings,
}

fn check_shape(errors: &mut Vec<String>, what: &str, dims: &[usize]) {
    if !(dims.is_empty() || dims.len() == 3 && dims.iter().all(|&d| d > 0)) {
        errors.push(format!("{what} must be empty or three positive sizes, got {dims:?}"));
    }
}

fn check_prob(errors: &mut Vec<String>, what: &str, p: f64) {
    if !(0.0..=1.0).contains(&p) {
        errors.push(format!("{what} must lie in [0, 1], got {p}"));
    }
}

impl Settings {
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let s: Settings = serde_yaml::from_value(cfg.value().clone()).map_err(|e| ConfigError::Validation(vec![e.to_string()]))?;
        let errors = s.violations(cfg);
        if errors.is_empty() {
            Ok(s)
        } else {
            Err(ConfigError::Validation(errors))
        }
    }

    fn violations(&self, cfg: &Config) -> Vec<String> {
        let mut e = Vec::new();
        let t = &self.training;
        if t.k < 2 {
            e.push(format!("training.K must be at least 2, got {}", t.k));
        }
        for &f in &t.folds_to_run {
            if f >= t.k {
                e.push(format!("training.folds_to_run entry {f} is outside 0..{}", t.k));
            }
        }
        if t.epochs == 0 {
            e.push("training.epochs must be positive".into());
        }
        let (monitor, _) = t.monitor();
        if metric_higher_is_better(&monitor).is_none() {
            e.push(format!("training.early_stopping.monitor '{}' is not val_loss or val_<metric>", t.early_stopping.monitor));
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0) {
            e.push(format!("training.optimizer.lr must be positive, got {}", o.lr));
        }
        if o.betas.len() != 2 || o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            e.push(format!("training.optimizer.betas must be two values in [0, 1), got {:?}", o.betas));
        }
        if o.weight_decay < 0.0 || o.eps <= 0.0 || !(0.0..1.0).contains(&o.momentum) || o.final_lr <= 0.0 || o.gamma <= 0.0 {
            e.push("training.optimizer: weight_decay >= 0, eps > 0, momentum in [0, 1), final_lr > 0 and gamma > 0 required".into());
        }
        let sc = &t.scheduler;
        if sc.step_size == 0 || !(sc.factor > 0.0 && sc.factor < 1.0) || sc.min_lr < 0.0 {
            e.push("training.scheduler: step_size > 0, factor in (0, 1) and min_lr >= 0 required".into());
        }
        let l = &t.loss;
        if l.focal_gamma < 0.0 || l.asl_gamma_pos < 0.0 || l.asl_gamma_neg < 0.0 || l.hill_gamma < 0.0 || !(0.0..1.0).contains(&l.asl_clip) {
            e.push("training.loss: gammas must be non-negative and asl_clip in [0, 1)".into());
        }

        let d = &self.data;
        if d.labels.is_empty() {
            e.push("data.labels must define at least one endpoint".into());
        }
        let mut seen = HashSet::new();
        for label in &d.labels {
            if label.name.is_empty() {
                e.push("data.labels entries need a name".into());
            }
            if !seen.insert(&label.name) {
                e.push(format!("label '{}' is defined twice", label.name));
            }
            if label.kind == LabelKind::Event && label.unit.is_empty() {
                e.push(format!("event label '{}' needs a time unit", label.name));
            }
        }
        let modalities: HashSet<&String> = d.modalities.iter().collect();
        if modalities.len() != d.modalities.len() {
            e.push("data.modalities contains duplicates".into());
        }
        for c in &self.preprocessing.clip_normalize {
            if !(c.a_min < c.a_max) {
                e.push(format!("clip_normalize for channel '{}': a_min {} must be below a_max {}", c.modality, c.a_min, c.a_max));
            }
            if !(c.b_min < c.b_max) {
                e.push(format!("clip_normalize for channel '{}': b_min {} must be below b_max {}", c.modality, c.b_min, c.b_max));
            }
            if !d.modalities.is_empty() && !modalities.contains(&c.modality) {
                e.push(format!("clip_normalize refers to unknown modality '{}'", c.modality));
            }
        }
        for v in &self.preprocessing.value_map {
            if !modalities.contains(&v.modality) {
                e.push(format!("value_map refers to unknown modality '{}'", v.modality));
            }
        }
        check_shape(&mut e, "preprocessing.crop_size", &self.preprocessing.crop_size);

        let a = &self.augmentation;
        check_shape(&mut e, "augmentation.random_crop", &a.random_crop);
        check_prob(&mut e, "augmentation.flip.p", a.flip.p);
        check_prob(&mut e, "augmentation.affine.p", a.affine.p);
        check_prob(&mut e, "augmentation.rotate.p", a.rotate.p);
        check_prob(&mut e, "augmentation.gaussian_noise.p", a.gaussian_noise.p);
        if a.flip.axes.iter().any(|&ax| ax > 2) {
            e.push(format!("augmentation.flip.axes must be spatial axes 0..2, got {:?}", a.flip.axes));
        }
        if a.rotate.max_degrees.len() != 3 {
            e.push("augmentation.rotate.max_degrees needs one angle per axis".into());
        }
        if a.affine.translate < 0.0 || !(0.0..1.0).contains(&a.affine.scale) || a.affine.shear < 0.0 {
            e.push("augmentation.affine: translate >= 0, scale in [0, 1) and shear >= 0 required".into());
        }
        if a.gaussian_noise.std < 0.0 {
            e.push("augmentation.gaussian_noise.std must be non-negative".into());
        }
        if a.mixup.enabled && !(a.mixup.alpha > 0.0) {
            e.push("augmentation.mixup.alpha must be positive".into());
        }

        let ds = &self.dataset;
        if !(ds.cache_fraction > 0.0 && ds.cache_fraction <= 1.0) {
            e.push(format!("dataset.cache_fraction must lie in (0, 1], got {}", ds.cache_fraction));
        }
        if !(ds.replace_rate > 0.0 && ds.replace_rate <= 1.0) {
            e.push(format!("dataset.replace_rate must lie in (0, 1], got {}", ds.replace_rate));
        }
        if ds.batch_size == 0 {
            e.push("dataset.batch_size must be positive".into());
        }

        match self.encoder_spec() {
            Ok(spec) => {
                if let Err(err) = spec.validate() {
                    e.push(err.to_string());
                }
                let mlp = spec.architecture == Architecture::None;
                if mlp && !d.modalities.is_empty() {
                    e.push("model.architecture 'none' requires data.modalities to be empty".into());
                }
                if !mlp && d.modalities.is_empty() {
                    e.push(format!("model.architecture '{}' needs at least one modality (use 'none' for tabular-only)", spec.architecture));
                }
                if mlp && d.tabular_features.is_empty() {
                    e.push("tabular-only models need data.tabular_features".into());
                }
            }
            Err(err) => e.push(err.to_string()),
        }
        if let Err(err) = self.output_spec().validate() {
            e.push(err.to_string());
        }

        let x = &self.experiment;
        if x.n_trials == 0 {
            e.push("experiment.n_trials must be at least 1".into());
        }
        if metric_higher_is_better(&x.metric).is_none() {
            e.push(format!("experiment.metric '{}' is not a known metric", x.metric));
        }
        for p in &x.search_space {
            if cfg.get(&p.path).is_none() {
                e.push(format!("search space path '{}' does not exist", p.path));
            }
            match &p.domain {
                SearchDomain::Float { low, high, log } if !(low < high) || (*log && *low <= 0.0) => {
                    e.push(format!("search space '{}' needs low < high (and low > 0 when log-scaled)", p.path));
                }
                SearchDomain::Int { low, high, log } if low > high || (*log && *low <= 0) => {
                    e.push(format!("search space '{}' needs low <= high (and low > 0 when log-scaled)", p.path));
                }
                SearchDomain::Categorical { choices } if choices.is_empty() => {
                    e.push(format!("search space '{}' has no choices", p.path));
                }
                _ => {}
            }
        }

        let ev = &self.evaluation;
        for m in &ev.metrics {
            if metric_higher_is_better(m).is_none() || m == "loss" {
                e.push(format!("evaluation.metrics: unknown metric '{m}'"));
            }
        }
        for v in &ev.visualisations {
            if !VISUALISATIONS.contains(&v.as_str()) {
                e.push(format!("evaluation.visualisations: unknown plot '{v}'"));
            }
        }
        if ev.n_bins == 0 {
            e.push("evaluation.n_bins must be positive".into());
        }
        if ev.km_groups < 2 {
            e.push("evaluation.km_groups must be at least 2".into());
        }
        if let Threshold::Fixed(t) = ev.threshold {
            check_prob(&mut e, "evaluation.threshold", t);
        }
        e
    }

    pub fn architecture(&self) -> Result<Architecture, ConfigError> {
        self.model.architecture.parse().map_err(|e: voxtrain_models::ModelError| ConfigError::Validation(vec![e.to_string()]))
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec, ConfigError> {
        let m = &self.model;
        let mut spec = EncoderSpec::new(self.architecture()?, m.size.clone());
        spec.cnn_widths = m.cnn.widths.clone();
        spec.vit = m.vit.spec();
        spec.transrp_backbone = m.transrp.backbone.parse().map_err(|e: voxtrain_models::ModelError| ConfigError::Validation(vec![e.to_string()]))?;
        spec.transrp_size = m.transrp.size.clone();
        spec.transrp_vit = m.transrp.vit.spec();
        Ok(spec)
    }

    pub fn output_spec(&self) -> OutputSpec {
        let o = &self.model.output;
        OutputSpec {
            n_shared_layers: o.n_shared_layers,
            shared_sizes: o.shared_sizes.clone(),
            n_endpoint_layers: o.n_endpoint_layers,
            endpoint_sizes: o.endpoint_sizes.clone(),
            n_clinical_layers: o.n_clinical_layers,
            clinical_sizes: o.clinical_sizes.clone(),
            clinical_concat_position: o.clinical_concat_position,
            dropout: o.dropout,
        }
    }

    pub fn endpoints(&self) -> Vec<EndpointSpec> {
        self.data.labels.iter().map(LabelSpec::endpoint).collect()
    }

    pub fn is_mlp(&self) -> bool {
        self.data.modalities.is_empty()
    }
}
