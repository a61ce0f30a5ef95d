//! Clinical CSV and volume tree parsing, train/test split and stratified folds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{LabelKind, LabelSpec, Settings};
use crate::volume_io::{read_shape, VolumeError};

pub const PATIENT_ID: &str = "PatientID";
pub const SPLIT: &str = "Split";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("clinical CSV has no column '{0}'")]
    MissingColumn(String),
    #[error("row {row}: Split must be train_val or test, found '{value}'")]
    BadSplitValue { row: usize, value: String },
    #[error("patient '{0}' appears more than once")]
    DuplicatePatientId(String),
    #[error("row {row}: empty PatientID")]
    EmptyPatientId { row: usize },
    #[error("patient '{id}' has no {modality} volume (expected {path})")]
    MissingVolume { id: String, modality: String, path: PathBuf },
    #[error("patient '{id}' {modality} volume has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { id: String, modality: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("row {row}, column '{column}': '{value}' is not a number")]
    NonNumericFeature { row: usize, column: String, value: String },
    #[error("row {row}, column '{column}': invalid label '{value}' ({reason})")]
    BadLabel { row: usize, column: String, value: String, reason: &'static str },
    #[error("no train_val patients")]
    EmptyTrainSet,
    #[error("no patients in the manifest")]
    EmptyManifest,
    #[error("cannot split {n} patients into {k} folds")]
    TooFewPatients { k: usize, n: usize },
    #[error("stratification column '{0}' is not in the clinical CSV")]
    UnknownStratVar(String),
    #[error("unknown patient '{0}'")]
    UnknownPatient(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    TrainVal,
    Test,
}

/// One endpoint's label for one patient. For binary endpoints `value` is the
/// class; for event endpoints it is the event indicator and `time` the
/// follow-up time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelValue {
    pub value: f64,
    pub time: f64,
    pub observed: bool,
}

impl LabelValue {
    pub const MISSING: LabelValue = LabelValue { value: 0.0, time: 0.0, observed: false };
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub split: Split,
    pub labels: Vec<LabelValue>,
    /// Raw tabular features; `None` marks an empty cell.
    pub tabular: Vec<Option<f64>>,
    /// Volume file per configured modality, in configured order.
    pub volume_paths: Vec<(String, PathBuf)>,
    /// Every CSV cell of the row, used for stratification.
    pub cells: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<PatientRecord>,
    pub label_specs: Vec<LabelSpec>,
    pub tabular_names: Vec<String>,
    pub modalities: Vec<String>,
    /// Shared volume shape; `None` for tabular-only data.
    pub volume_shape: Option<[usize; 3]>,
    pub columns: Vec<String>,
}

fn is_missing(cell: &str, indicator: &str) -> bool {
    if cell == indicator {
        return true;
    }
    matches!((cell.parse::<f64>(), indicator.parse::<f64>()), (Ok(a), Ok(b)) if a == b)
}

fn is_empty_cell(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

/// What to load and how; usually built from [`Settings`].
#[derive(Clone, Debug)]
pub struct DataContract {
    pub csv_path: PathBuf,
    pub data_root: PathBuf,
    pub modalities: Vec<String>,
    pub tabular_features: Vec<String>,
    pub labels: Vec<LabelSpec>,
    pub missing_indicator: String,
}

impl DataContract {
    pub fn from_settings(s: &Settings) -> Self {
        Self {
            csv_path: s.data.csv_path.clone(),
            data_root: s.data.data_root.clone(),
            modalities: s.data.modalities.clone(),
            tabular_features: s.data.tabular_features.clone(),
            labels: s.data.labels.clone(),
            missing_indicator: s.data.missing_indicator.clone(),
        }
    }

    pub fn volume_path(&self, id: &str, modality: &str) -> PathBuf {
        self.data_root.join(id).join(format!("{modality}.npy"))
    }
}

pub fn load_manifest(contract: &DataContract) -> Result<Manifest, DataError> {
    let (manifest, mut problems) = scan_manifest(contract);
    if problems.is_empty() {
        Ok(manifest.expect("a manifest is produced when there are no problems"))
    } else {
        Err(problems.swap_remove(0))
    }
}

/// Checks the whole data contract, collecting every violation.
pub fn validate_data(contract: &DataContract) -> Vec<DataError> {
    scan_manifest(contract).1
}

fn parse_label(row: usize, spec: &LabelSpec, cells: &HashMap<&str, &str>, missing: &str, errors: &mut Vec<DataError>) -> LabelValue {
    let cols = spec.columns();
    let bad = |col: &str, value: &str, reason| DataError::BadLabel { row, column: col.to_string(), value: value.to_string(), reason };
    let cell = cells[cols[0].as_str()];
    match spec.kind {
        LabelKind::Binary => {
            if is_missing(cell, missing) {
                return LabelValue::MISSING;
            }
            match cell.parse::<f64>() {
                Ok(v) if v == 0.0 || v == 1.0 => LabelValue { value: v, time: 0.0, observed: true },
                _ => {
                    errors.push(bad(&cols[0], cell, "binary labels must be 0 or 1"));
                    LabelValue::MISSING
                }
            }
        }
        LabelKind::Event => {
            let time_cell = cells[cols[1].as_str()];
            if is_missing(cell, missing) || is_missing(time_cell, missing) {
                return LabelValue::MISSING;
            }
            let event = match cell.parse::<f64>() {
                Ok(v) if v == 0.0 || v == 1.0 => v,
                _ => {
                    errors.push(bad(&cols[0], cell, "event indicators must be 0 or 1"));
                    return LabelValue::MISSING;
                }
            };
            match time_cell.parse::<f64>() {
                Ok(t) if t > 0.0 && t.is_finite() => LabelValue { value: event, time: t, observed: true },
                _ => {
                    errors.push(bad(&cols[1], time_cell, "event times must be positive"));
                    LabelValue::MISSING
                }
            }
        }
    }
}

fn scan_manifest(c: &DataContract) -> (Option<Manifest>, Vec<DataError>) {
    let mut errors = Vec::new();
    let csv_err = |e: csv::Error| DataError::Csv { path: c.csv_path.clone(), message: e.to_string() };
    let mut reader = match csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&c.csv_path) {
        Ok(r) => r,
        Err(e) => return (None, vec![csv_err(e)]),
    };
    let header: Vec<String> = match reader.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(e) => return (None, vec![csv_err(e)]),
    };
    let mut required = vec![PATIENT_ID.to_string(), SPLIT.to_string()];
    required.extend(c.labels.iter().flat_map(LabelSpec::columns));
    required.extend(c.tabular_features.iter().cloned());
    for col in &required {
        if !header.contains(col) {
            errors.push(DataError::MissingColumn(col.clone()));
        }
    }
    if !errors.is_empty() {
        return (None, errors);
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errors.push(csv_err(e));
                continue;
            }
        };
        let cells: HashMap<&str, &str> = header.iter().map(String::as_str).zip(row.iter()).collect();
        let id = cells.get(PATIENT_ID).copied().unwrap_or("").to_string();
        if id.is_empty() {
            errors.push(DataError::EmptyPatientId { row: line });
            continue;
        }
        if !seen.insert(id.clone()) {
            errors.push(DataError::DuplicatePatientId(id.clone()));
        }
        let split = match cells.get(SPLIT).copied().unwrap_or("") {
            "train_val" => Split::TrainVal,
            "test" => Split::Test,
            other => {
                errors.push(DataError::BadSplitValue { row: line, value: other.to_string() });
                Split::TrainVal
            }
        };
        let labels = c.labels.iter().map(|spec| parse_label(line, spec, &cells, &c.missing_indicator, &mut errors)).collect();
        let tabular = c
            .tabular_features
            .iter()
            .map(|col| {
                let cell = cells[col.as_str()];
                if is_empty_cell(cell) {
                    return None;
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Some(v),
                    _ => {
                        errors.push(DataError::NonNumericFeature { row: line, column: col.clone(), value: cell.to_string() });
                        None
                    }
                }
            })
            .collect();
        let volume_paths = c.modalities.iter().map(|m| (m.clone(), c.volume_path(&id, m))).collect();
        let cells = cells.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        records.push(PatientRecord { patient_id: id, split, labels, tabular, volume_paths, cells });
    }
    if records.is_empty() && errors.is_empty() {
        errors.push(DataError::EmptyManifest);
    }

    let mut volume_shape: Option<Vec<usize>> = None;
    for r in &records {
        for (modality, path) in &r.volume_paths {
            if !path.is_file() {
                errors.push(DataError::MissingVolume { id: r.patient_id.clone(), modality: modality.clone(), path: path.clone() });
                continue;
            }
            match read_shape(path) {
                Ok(shape) if shape.len() != 3 => {
                    errors.push(VolumeError::NotThreeDimensional { path: path.clone(), shape }.into());
                }
                Ok(shape) => match &volume_shape {
                    None => volume_shape = Some(shape),
                    Some(expected) if *expected != shape => errors.push(DataError::ShapeMismatch {
                        id: r.patient_id.clone(),
                        modality: modality.clone(),
                        found: shape,
                        expected: expected.clone(),
                    }),
                    Some(_) => {}
                },
                Err(e) => errors.push(e.into()),
            }
        }
    }
    let manifest = Manifest {
        records,
        label_specs: c.labels.clone(),
        tabular_names: c.tabular_features.clone(),
        modalities: c.modalities.clone(),
        volume_shape: volume_shape.map(|s| [s[0], s[1], s[2]]),
        columns: header,
    };
    (Some(manifest), errors)
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.patient_id == id)
    }

    fn with_records(&self, records: Vec<PatientRecord>) -> Self {
        Self { records, ..self.clone() }
    }

    /// Records with the given ids, in manifest order.
    pub fn subset(&self, ids: &[String]) -> Result<Self, DataError> {
        let wanted: HashSet<&String> = ids.iter().collect();
        let records: Vec<PatientRecord> = self.records.iter().filter(|r| wanted.contains(&r.patient_id)).cloned().collect();
        if records.len() != wanted.len() {
            let have: HashSet<&String> = records.iter().map(|r| &r.patient_id).collect();
            let missing = ids.iter().find(|id| !have.contains(id)).expect("some id is missing");
            return Err(DataError::UnknownPatient(missing.clone()));
        }
        Ok(self.with_records(records))
    }
}

pub fn split_train_test(m: &Manifest) -> Result<(Manifest, Manifest), DataError> {
    let (train, test): (Vec<_>, Vec<_>) = m.records.iter().cloned().partition(|r| r.split == Split::TrainVal);
    if train.is_empty() {
        return Err(DataError::EmptyTrainSet);
    }
    Ok((m.with_records(train), m.with_records(test)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Stratified K-fold partition of `m`.
///
/// Patients are grouped by the joint value of `strat_vars` (a missing-label
/// cell is just another value), shuffled within each group, and the groups
/// are laid end to end. Dealing that sequence round-robin onto the folds
/// keeps every fold size and every per-stratum count within one of each other.
pub fn stratified_kfold(m: &Manifest, k: usize, strat_vars: &[String], seed: u64) -> Result<Vec<Fold>, DataError> {
    let n = m.len();
    if k < 2 || k > n {
        return Err(DataError::TooFewPatients { k, n });
    }
    for var in strat_vars {
        if !m.columns.contains(var) {
            return Err(DataError::UnknownStratVar(var.clone()));
        }
    }
    let mut strata: BTreeMap<Vec<&str>, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        let key = strat_vars.iter().map(|v| r.cells.get(v).map_or("", String::as_str)).collect();
        strata.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = strata.into_values().collect();
    groups.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    // Random fold labelling so that fold 0 is not always the first dealt.
    let mut labels: Vec<usize> = (0..k).collect();
    labels.shuffle(&mut rng);
    let mut pos = 0;
    for mut g in groups {
        g.shuffle(&mut rng);
        for i in g {
            fold_of[i] = labels[pos % k];
            pos += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) = m.records.iter().enumerate().partition(|(i, _)| fold_of[*i] == f);
            Fold {
                index: f,
                train: train.into_iter().map(|(_, r)| r.patient_id.clone()).collect(),
                val: val.into_iter().map(|(_, r)| r.patient_id.clone()).collect(),
            }
        })
        .collect())
}

/// Column means and standard deviations used to impute and standardize tabular features.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TabularStats {
    /// Statistics over the observed cells of `m`; columns with no observed
    /// cell get mean 0, and constant columns get std 1.
    pub fn fit(m: &Manifest) -> Self {
        let f = m.tabular_names.len();
        let mut mean = vec![0.0; f];
        let mut std = vec![1.0; f];
        for j in 0..f {
            let vals: Vec<f64> = m.records.iter().filter_map(|r| r.tabular[j]).collect();
            if vals.is_empty() {
                continue;
            }
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[j] = mu;
            std[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Self { names: m.tabular_names.clone(), mean, std }
    }

    /// Mean-imputed, standardized feature vector.
    pub fn transform(&self, raw: &[Option<f64>]) -> Vec<f32> {
        raw.iter().enumerate().map(|(j, v)| ((v.unwrap_or(self.mean[j]) - self.mean[j]) / self.std[j]) as f32).collect()
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["feature", "mean", "std"])?;
        for j in 0..self.names.len() {
            w.write_record([self.names[j].clone(), self.mean[j].to_string(), self.std[j].to_string()])?;
        }
        w.flush()
    }

    pub fn read_csv(path: &Path) -> Result<Self, DataError> {
        let err = |message: String| DataError::Csv { path: path.to_path_buf(), message };
        let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let mut s = Self { names: vec![], mean: vec![], std: vec![] };
        for row in r.records() {
            let row = row.map_err(|e| err(e.to_string()))?;
            let num = |i: usize| row.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| err(format!("bad number in row {row:?}")));
            s.names.push(row.get(0).unwrap_or("").to_string());
            s.mean.push(num(1)?);
            s.std.push(num(2)?);
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::write_array;
    use std::fs;

    struct Fixture {
        _dir: tempfile::TempDir,
        contract: DataContract,
    }

    fn fixture(csv: &str, modalities: &[&str], labels: Vec<LabelSpec>, tabular: &[&str]) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("clinical.csv");
        fs::write(&csv_path, csv).unwrap();
        let root = dir.path().join("volumes");
        let contract = DataContract {
            csv_path,
            data_root: root,
            modalities: modalities.iter().map(|s| s.to_string()).collect(),
            tabular_features: tabular.iter().map(|s| s.to_string()).collect(),
            labels,
            missing_indicator: "-1".into(),
        };
        Fixture { _dir: dir, contract }
    }

    fn add_volume(c: &DataContract, id: &str, modality: &str, shape: [usize; 3]) {
        let p = c.volume_path(id, modality);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        write_array(&p, &shape, &vec![0i16; shape.iter().product()]).unwrap();
    }

    #[test]
    fn parses_labels_and_missing_cells() {
        let f = fixture("PatientID,Split,sex,age\nP001,train_val,1,60\nP002,test,-1,\n", &[], vec![LabelSpec::binary("sex")], &["age"]);
        let m = load_manifest(&f.contract).unwrap();
        assert_eq!(m.records[0].labels[0], LabelValue { value: 1.0, time: 0.0, observed: true });
        assert!(!m.records[1].labels[0].observed);
        assert_eq!(m.records[1].tabular, vec![None]);
        assert_eq!(m.volume_shape, None);
    }

    #[test]
    fn missing_volume_is_named() {
        let f = fixture("PatientID,Split,y\nP001,train_val,0\n", &["CT", "PET"], vec![LabelSpec::binary("y")], &[]);
        add_volume(&f.contract, "P001", "CT", [4, 4, 4]);
        let errs = validate_data(&f.contract);
        assert!(matches!(&errs[..], [DataError::MissingVolume { id, modality, .. }] if id == "P001" && modality == "PET"));
    }

    #[test]
    fn every_violation_is_collected() {
        let f = fixture(
            "PatientID,Split,y,age\nP1,train_val,2,x\nP1,valid,0,3\nP3,test,1,4\n",
            &["CT"],
            vec![LabelSpec::binary("y")],
            &["age"],
        );
        add_volume(&f.contract, "P1", "CT", [4, 4, 4]);
        add_volume(&f.contract, "P3", "CT", [4, 4, 5]);
        let errs = validate_data(&f.contract);
        let has = |p: fn(&DataError) -> bool| errs.iter().any(p);
        assert!(has(|e| matches!(e, DataError::BadLabel { row: 2, .. })));
        assert!(has(|e| matches!(e, DataError::NonNumericFeature { row: 2, .. })));
        assert!(has(|e| matches!(e, DataError::DuplicatePatientId(_))));
        assert!(has(|e| matches!(e, DataError::BadSplitValue { row: 3, .. })));
        assert!(has(|e| matches!(e, DataError::ShapeMismatch { .. })));
    }

    #[test]
    fn missing_columns_are_reported() {
        let f = fixture("PatientID,Split\nP1,test\n", &[], vec![LabelSpec::event("OS", "months")], &[]);
        let errs = validate_data(&f.contract);
        assert_eq!(errs.len(), 2);
        assert!(matches!(&errs[0], DataError::MissingColumn(c) if c == "OS_event"));
    }

    #[test]
    fn event_labels_need_positive_times() {
        let csv = "PatientID,Split,OS_event,OS_months\nA,train_val,1,12.5\nB,train_val,0,-1\nC,train_val,1,0\n";
        let f = fixture(csv, &[], vec![LabelSpec::event("OS", "months")], &[]);
        let errs = validate_data(&f.contract);
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(matches!(&errs[0], DataError::BadLabel { row: 4, .. }));
    }

    #[test]
    fn train_test_partition() {
        let mut csv = String::from("PatientID,Split,y\n");
        for i in 0..10 {
            csv += &format!("P{i},{},0\n", if i < 8 { "train_val" } else { "test" });
        }
        let f = fixture(&csv, &[], vec![LabelSpec::binary("y")], &[]);
        let m = load_manifest(&f.contract).unwrap();
        let (tr, te) = split_train_test(&m).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let all_test = m.with_records(te.records.clone());
        assert!(matches!(split_train_test(&all_test), Err(DataError::EmptyTrainSet)));
    }

    #[test]
    fn balanced_binary_label_gives_one_of_each_per_fold() {
        let mut csv = String::from("PatientID,Split,y\n");
        for i in 0..10 {
            csv += &format!("P{i},train_val,{}\n", i % 2);
        }
        let f = fixture(&csv, &[], vec![LabelSpec::binary("y")], &[]);
        let m = load_manifest(&f.contract).unwrap();
        let folds = stratified_kfold(&m, 5, &["y".into()], 7).unwrap();
        for fold in &folds {
            assert_eq!(fold.val.len(), 2);
            let ones = fold.val.iter().filter(|id| m.get(id).unwrap().labels[0].value == 1.0).count();
            assert_eq!(ones, 1);
        }
        assert_eq!(folds, stratified_kfold(&m, 5, &["y".into()], 7).unwrap());
        assert!(matches!(stratified_kfold(&m, 11, &[], 0), Err(DataError::TooFewPatients { .. })));
        assert!(matches!(stratified_kfold(&m, 2, &["z".into()], 0), Err(DataError::UnknownStratVar(_))));
    }

    #[test]
    fn tabular_stats_impute_and_standardize() {
        let f = fixture("PatientID,Split,y,a\nA,train_val,0,1\nB,train_val,1,3\nC,train_val,0,\n", &[], vec![LabelSpec::binary("y")], &["a"]);
        let m = load_manifest(&f.contract).unwrap();
        let s = TabularStats::fit(&m);
        assert_eq!((s.mean[0], s.std[0]), (2.0, 1.0));
        assert_eq!(s.transform(&[Some(3.0)]), vec![1.0]);
        assert_eq!(s.transform(&[None]), vec![0.0]);
        let p = f.contract.csv_path.with_file_name("stats.csv");
        s.write_csv(&p).unwrap();
        assert_eq!(TabularStats::read_csv(&p).unwrap(), s);
    }
}
