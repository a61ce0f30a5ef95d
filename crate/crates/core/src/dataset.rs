//! Sample assembly, caching strategies and batching.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::UNIX_EPOCH;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use voxtrain_tensor::Tensor;

use crate::config::{CacheKind, LabelKind, Settings};
use crate::manifest::{Manifest, PatientRecord, TabularStats};
use crate::transforms::{mixup_with, Image, Stage, TransformError, TransformPlan};
use crate::volume_io::{read_volume, VolumeError};

const CACHE_MAGIC: &[u8; 8] = b"VXCACHE1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown patient '{0}'")]
    UnknownPatient(String),
    #[error("cache directory {path} is not writable: {source}")]
    CacheDirUnwritable { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Model input for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    /// `(C, d0, d1, d2)`; absent for tabular-only data.
    pub image: Option<Image>,
    pub tabular: Vec<f32>,
    /// Binary class, or event indicator for event endpoints.
    pub labels: Vec<f32>,
    /// Event time; zero for binary endpoints.
    pub times: Vec<f32>,
    pub mask: Vec<bool>,
}

/// Samples stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub patient_ids: Vec<String>,
    /// `(B, C, d0, d1, d2)`
    pub images: Option<Tensor<f32>>,
    /// `(B, F)`
    pub tabular: Tensor<f32>,
    /// `(B, E)`
    pub labels: Tensor<f32>,
    pub times: Tensor<f32>,
    /// `(B, E)`, 1 for observed entries.
    pub masks: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    pub fn collate(samples: &[Sample]) -> Result<Self, TransformError> {
        let b = samples.len();
        let f = samples.first().map_or(0, |s| s.tabular.len());
        let e = samples.first().map_or(0, |s| s.labels.len());
        let images = match samples.first().and_then(|s| s.image.as_ref()) {
            None => None,
            Some(first) => {
                let mut data = Vec::with_capacity(b * first.data.len());
                for s in samples {
                    match &s.image {
                        Some(img) if img.shape == first.shape && img.channels == first.channels => data.extend_from_slice(&img.data),
                        _ => return Err(TransformError::ShapeMismatch(format!("sample '{}' does not match the batch image shape", s.patient_id))),
                    }
                }
                let [d0, d1, d2] = first.shape;
                Some(Tensor::from_vec(data, &[b, first.channels, d0, d1, d2]))
            }
        };
        let flat = |g: &dyn Fn(&Sample) -> Vec<f32>, width: usize| Tensor::from_vec(samples.iter().flat_map(g).collect(), &[b, width]);
        Ok(Self {
            patient_ids: samples.iter().map(|s| s.patient_id.clone()).collect(),
            images,
            tabular: flat(&|s| s.tabular.clone(), f),
            labels: flat(&|s| s.labels.clone(), e),
            times: flat(&|s| s.times.clone(), e),
            masks: flat(&|s| s.mask.iter().map(|&m| m as u8 as f32).collect(), e),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheStrategy {
    pub kind: CacheKind,
    /// Cached share of the dataset (smartcache).
    pub fraction: f64,
    /// Share of the cached items replaced per epoch (smartcache).
    pub replace_rate: f64,
    /// Root of the on-disk cache (persistent).
    pub cache_dir: PathBuf,
}

impl CacheStrategy {
    pub fn standard() -> Self {
        Self { kind: CacheKind::Standard, fraction: 1.0, replace_rate: 0.25, cache_dir: PathBuf::new() }
    }

    pub fn from_settings(s: &Settings) -> Self {
        Self { kind: s.dataset.strategy, fraction: s.dataset.cache_fraction, replace_rate: s.dataset.replace_rate, cache_dir: s.dataset.cache_dir.clone() }
    }
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct CacheHeader {
    sources: Vec<(String, u64, u128)>,
    shape: [usize; 4],
    dtype: String,
}

fn source_identity(record: &PatientRecord) -> Vec<(String, u64, u128)> {
    record
        .volume_paths
        .iter()
        .map(|(_, p)| {
            let meta = fs::metadata(p).ok();
            let len = meta.as_ref().map_or(0, |m| m.len());
            let mtime = meta.and_then(|m| m.modified().ok()).and_then(|t| t.duration_since(UNIX_EPOCH).ok()).map_or(0, |d| d.as_nanos());
            (p.to_string_lossy().into_owned(), len, mtime)
        })
        .collect()
}

fn encode_cache(img: &Image, sources: Vec<(String, u64, u128)>) -> Vec<u8> {
    let [d0, d1, d2] = img.shape;
    let header = serde_json::to_vec(&CacheHeader { sources, shape: [img.channels, d0, d1, d2], dtype: "f32".into() }).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + img.data.len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes a cache file, rejecting corrupt files and stale sources.
fn decode_cache(bytes: &[u8], sources: &[(String, u64, u128)]) -> Option<Image> {
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return None;
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().ok()?) {
        return None;
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().ok()?) as usize;
    let header: CacheHeader = serde_json::from_slice(body.get(12..12 + hlen)?).ok()?;
    if header.sources != sources || header.dtype != "f32" {
        return None;
    }
    let data: Vec<f32> = body[12 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let [c, d0, d1, d2] = header.shape;
    (data.len() == c * d0 * d1 * d2).then_some(Image { channels: c, shape: [d0, d1, d2], data })
}

/// Writes via a temporary file and rename so readers never see partial entries.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_data()?;
    fs::rename(&tmp, path)
}

enum Store {
    /// Recompute on every access.
    Direct,
    /// Every deterministic output held in memory.
    Memory(Vec<Image>),
    /// A rotating subset held in memory.
    Smart { slots: HashMap<usize, Image>, order: VecDeque<usize>, cursor: usize, replace: usize },
    /// One file per patient under this directory.
    Disk(PathBuf),
}

/// Patients of one cohort with their preprocessing, caching and augmentation.
pub struct Dataset {
    records: Vec<PatientRecord>,
    index: HashMap<String, usize>,
    plan: TransformPlan,
    stats: TabularStats,
    kinds: Vec<LabelKind>,
    stage: Stage,
    store: Store,
    computations: AtomicUsize,
}

impl Dataset {
    pub fn build(manifest: &Manifest, plan: &TransformPlan, stats: &TabularStats, strategy: &CacheStrategy, stage: Stage) -> Result<Self, DatasetError> {
        let records = manifest.records.clone();
        let index = records.iter().enumerate().map(|(i, r)| (r.patient_id.clone(), i)).collect();
        let mut ds = Self {
            records,
            index,
            plan: plan.clone(),
            stats: stats.clone(),
            kinds: manifest.label_specs.iter().map(|l| l.kind).collect(),
            stage,
            store: Store::Direct,
            computations: AtomicUsize::new(0),
        };
        if ds.plan.modalities.is_empty() {
            return Ok(ds);
        }
        let n = ds.records.len();
        ds.store = match strategy.kind {
            CacheKind::Standard => Store::Direct,
            CacheKind::Cache => Store::Memory((0..n).map(|i| ds.compute(i)).collect::<Result<_, _>>()?),
            CacheKind::Smartcache => {
                let size = ((strategy.fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
                let mut slots = HashMap::new();
                for i in 0..size {
                    slots.insert(i, ds.compute(i)?);
                }
                let replace = ((strategy.replace_rate * size as f64).ceil() as usize).max(1);
                Store::Smart { slots, order: (0..size).collect(), cursor: size % n.max(1), replace }
            }
            CacheKind::Persistent => {
                let dir = strategy.cache_dir.join(ds.plan.digest());
                fs::create_dir_all(&dir).map_err(|source| DatasetError::CacheDirUnwritable { path: dir.clone(), source })?;
                for i in 0..n {
                    ds.disk_entry(&dir, i)?;
                }
                Store::Disk(dir)
            }
        };
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    pub fn label_kinds(&self) -> &[LabelKind] {
        &self.kinds
    }

    /// Number of times the deterministic chain has run.
    pub fn deterministic_computations(&self) -> usize {
        self.computations.load(Ordering::Relaxed)
    }

    /// Indices currently held by a smartcache; `None` for other strategies.
    pub fn cached_indices(&self) -> Option<Vec<usize>> {
        match &self.store {
            Store::Smart { order, .. } => Some(order.iter().copied().collect()),
            _ => None,
        }
    }

    fn compute(&self, i: usize) -> Result<Image, DatasetError> {
        self.computations.fetch_add(1, Ordering::Relaxed);
        let vols = self.records[i].volume_paths.iter().map(|(_, p)| read_volume(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(self.plan.preprocess(vols)?)
    }

    fn disk_entry(&self, dir: &Path, i: usize) -> Result<Image, DatasetError> {
        let r = &self.records[i];
        let path = dir.join(format!("{}.bin", r.patient_id));
        let sources = source_identity(r);
        if let Some(img) = fs::read(&path).ok().and_then(|b| decode_cache(&b, &sources)) {
            return Ok(img);
        }
        let img = self.compute(i)?;
        write_atomic(&path, &encode_cache(&img, sources)).map_err(|source| DatasetError::CacheDirUnwritable { path: path.clone(), source })?;
        Ok(img)
    }

    fn image(&self, i: usize) -> Result<Option<Image>, DatasetError> {
        if self.plan.modalities.is_empty() {
            return Ok(None);
        }
        let img = match &self.store {
            Store::Direct => self.compute(i)?,
            Store::Memory(all) => all[i].clone(),
            Store::Smart { slots, .. } => match slots.get(&i) {
                Some(img) => img.clone(),
                None => self.compute(i)?,
            },
            Store::Disk(dir) => self.disk_entry(dir, i)?,
        };
        Ok(Some(img))
    }

    fn assemble(&self, i: usize, image: Option<Image>) -> Sample {
        let r = &self.records[i];
        Sample {
            patient_id: r.patient_id.clone(),
            image,
            tabular: self.stats.transform(&r.tabular),
            labels: r.labels.iter().map(|l| l.value as f32).collect(),
            times: r.labels.iter().map(|l| l.time as f32).collect(),
            mask: r.labels.iter().map(|l| l.observed).collect(),
        }
    }

    /// Sample `i` for this dataset's stage; random steps run only in training.
    pub fn sample<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<Sample, DatasetError> {
        let image = match (self.image(i)?, self.stage) {
            (Some(img), Stage::Train) => Some(self.plan.augment(&img, rng)?),
            (img, _) => img,
        };
        Ok(self.assemble(i, image))
    }

    /// Preprocessed, unaugmented sample for one patient.
    pub fn get_patient(&self, id: &str) -> Result<Sample, DatasetError> {
        let &i = self.index.get(id).ok_or_else(|| DatasetError::UnknownPatient(id.to_string()))?;
        Ok(self.assemble(i, self.image(i)?))
    }

    /// Rotates the smartcache: the oldest entries make room for the next
    /// uncached patients in dataset order. No-op for other strategies.
    pub fn next_epoch(&mut self) -> Result<(), DatasetError> {
        let n = self.records.len();
        let Store::Smart { slots, order, cursor, replace } = &mut self.store else { return Ok(()) };
        let swaps = (*replace).min(n - order.len());
        let mut incoming = Vec::with_capacity(swaps);
        while incoming.len() < swaps {
            if !slots.contains_key(cursor) {
                incoming.push(*cursor);
            }
            *cursor = (*cursor + 1) % n;
        }
        for _ in 0..swaps {
            let old = order.pop_front().expect("cache is non-empty");
            slots.remove(&old);
        }
        let (mut slots, mut order) = (std::mem::take(slots), std::mem::take(order));
        for i in incoming {
            slots.insert(i, self.compute(i)?);
            order.push_back(i);
        }
        if let Store::Smart { slots: s, order: o, .. } = &mut self.store {
            *s = slots;
            *o = order;
        }
        Ok(())
    }

    /// Loads and collates the given samples, applying mixup in training when configured.
    pub fn load_batch<R: Rng + ?Sized>(&self, indices: &[usize], rng: &mut R) -> Result<Batch, DatasetError> {
        let mut samples = indices.iter().map(|&i| self.sample(i, rng)).collect::<Result<Vec<_>, _>>()?;
        if let (Stage::Train, Some(alpha)) = (self.stage, self.plan.mixup_alpha) {
            if samples.len() > 1 {
                let lambda = Beta::new(alpha, alpha).map_err(|e| TransformError::ShapeMismatch(e.to_string()))?.sample(rng);
                let mut partner: Vec<usize> = (0..samples.len()).collect();
                partner.shuffle(rng);
                samples = (0..samples.len()).map(|i| mixup_with(&samples[i], &samples[partner[i]], lambda, &self.kinds)).collect::<Result<_, _>>()?;
            }
        }
        Ok(Batch::collate(&samples)?)
    }

    /// Preprocessed, unaugmented batch regardless of stage.
    pub fn eval_batch(&self, indices: &[usize]) -> Result<Batch, DatasetError> {
        let samples = indices.iter().map(|&i| Ok(self.assemble(i, self.image(i)?))).collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(Batch::collate(&samples)?)
    }

    /// One epoch of batches covering every sample once.
    pub fn batches<'a, R: Rng + ?Sized>(&'a self, batch_size: usize, shuffle: bool, rng: &'a mut R) -> impl Iterator<Item = Result<Batch, DatasetError>> + 'a {
        let order = batch_order(self.len(), batch_size, shuffle, rng);
        order.into_iter().map(move |idx| self.load_batch(&idx, rng))
    }
}

/// Sample indices grouped into batches; the last batch may be short.
pub fn batch_order<R: Rng + ?Sized>(n: usize, batch_size: usize, shuffle: bool, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(rng);
    }
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LabelSpec;
    use crate::manifest::{LabelValue, Split};
    use crate::transforms::{DeterministicStep, RandomStep};
    use crate::volume_io::write_array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        dir: tempfile::TempDir,
        manifest: Manifest,
        plan: TransformPlan,
    }

    fn fixture(n: usize) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for i in 0..n {
            let id = format!("P{i:03}");
            let path = dir.path().join(&id).join("CT.npy");
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            let data: Vec<i16> = (0..64).map(|v| (v * 7 + i * 13) as i16 % 500 - 250).collect();
            write_array(&path, &[4, 4, 4], &data).unwrap();
            records.push(PatientRecord {
                patient_id: id,
                split: Split::TrainVal,
                labels: vec![LabelValue { value: (i % 2) as f64, time: 0.0, observed: i % 5 != 0 }],
                tabular: vec![Some(i as f64)],
                volume_paths: vec![("CT".into(), path)],
                cells: Default::default(),
            });
        }
        let manifest = Manifest {
            records,
            label_specs: vec![LabelSpec::binary("y")],
            tabular_names: vec!["age".into()],
            modalities: vec!["CT".into()],
            volume_shape: Some([4, 4, 4]),
            columns: vec![],
        };
        let plan = TransformPlan {
            modalities: vec!["CT".into()],
            deterministic: vec![DeterministicStep::ClipNormalize { modality: "CT".into(), a_min: -200.0, a_max: 200.0, b_min: 0.0, b_max: 1.0 }],
            random: vec![RandomStep::Flip { axes: vec![0], p: 0.5 }],
            mixup_alpha: None,
        };
        Fixture { dir, manifest, plan }
    }

    fn strategy(kind: CacheKind, dir: &Path) -> CacheStrategy {
        CacheStrategy { kind, fraction: 0.5, replace_rate: 0.25, cache_dir: dir.join("cache") }
    }

    fn build(f: &Fixture, kind: CacheKind, stage: Stage) -> Dataset {
        let stats = TabularStats::fit(&f.manifest);
        Dataset::build(&f.manifest, &f.plan, &stats, &strategy(kind, f.dir.path()), stage).unwrap()
    }

    #[test]
    fn caching_is_transparent_in_eval() {
        let f = fixture(6);
        let reference = build(&f, CacheKind::Standard, Stage::Eval);
        for kind in [CacheKind::Cache, CacheKind::Smartcache, CacheKind::Persistent] {
            let ds = build(&f, kind, Stage::Eval);
            for id in reference.ids() {
                assert_eq!(ds.get_patient(&id).unwrap(), reference.get_patient(&id).unwrap(), "{kind:?}");
            }
        }
    }

    #[test]
    fn persistent_cache_is_reused_and_invalidated() {
        let mut f = fixture(4);
        let first = build(&f, CacheKind::Persistent, Stage::Eval);
        assert_eq!(first.deterministic_computations(), 4);
        let second = build(&f, CacheKind::Persistent, Stage::Eval);
        for id in second.ids() {
            second.get_patient(&id).unwrap();
        }
        assert_eq!(second.deterministic_computations(), 0);
        if let DeterministicStep::ClipNormalize { a_min, .. } = &mut f.plan.deterministic[0] {
            *a_min = -100.0;
        }
        assert_eq!(build(&f, CacheKind::Persistent, Stage::Eval).deterministic_computations(), 4);
    }

    #[test]
    fn corrupt_cache_entry_is_recomputed() {
        let f = fixture(2);
        build(&f, CacheKind::Persistent, Stage::Eval);
        let entry = f.dir.path().join("cache").join(f.plan.digest()).join("P000.bin");
        let mut bytes = fs::read(&entry).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&entry, bytes).unwrap();
        assert_eq!(build(&f, CacheKind::Persistent, Stage::Eval).deterministic_computations(), 1);
    }

    #[test]
    fn unwritable_cache_dir_is_reported() {
        let f = fixture(1);
        let blocker = f.dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let s = CacheStrategy { cache_dir: blocker, ..strategy(CacheKind::Persistent, f.dir.path()) };
        let r = Dataset::build(&f.manifest, &f.plan, &TabularStats::fit(&f.manifest), &s, Stage::Eval);
        assert!(matches!(r, Err(DatasetError::CacheDirUnwritable { .. })));
    }

    #[test]
    fn smartcache_rotation_covers_every_patient() {
        let f = fixture(10);
        let stats = TabularStats::fit(&f.manifest);
        let s = CacheStrategy { fraction: 0.3, replace_rate: 1.0, ..strategy(CacheKind::Smartcache, f.dir.path()) };
        let mut ds = Dataset::build(&f.manifest, &f.plan, &stats, &s, Stage::Eval).unwrap();
        let mut seen = std::collections::HashSet::new();
        // ceil(10 / 3) = 4 epochs
        for _ in 0..4 {
            let cached = ds.cached_indices().unwrap();
            assert_eq!(cached.len(), 3);
            seen.extend(cached);
            ds.next_epoch().unwrap();
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn smartcache_full_fraction_behaves_as_cache() {
        let f = fixture(5);
        let stats = TabularStats::fit(&f.manifest);
        let s = CacheStrategy { fraction: 1.0, ..strategy(CacheKind::Smartcache, f.dir.path()) };
        let mut ds = Dataset::build(&f.manifest, &f.plan, &stats, &s, Stage::Eval).unwrap();
        ds.next_epoch().unwrap();
        for id in ds.ids() {
            ds.get_patient(&id).unwrap();
        }
        assert_eq!(ds.deterministic_computations(), 5);
    }

    #[test]
    fn get_patient_errors_and_batches() {
        let f = fixture(10);
        let ds = build(&f, CacheKind::Cache, Stage::Train);
        assert!(matches!(ds.get_patient("nope"), Err(DatasetError::UnknownPatient(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sizes: Vec<usize> = ds.batches(4, false, &mut rng).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<String> = ds.batches(4, false, &mut rng).flat_map(|b| b.unwrap().patient_ids).collect();
        assert_eq!(ids, ds.ids());
        let b = ds.load_batch(&[0, 1], &mut rng).unwrap();
        assert_eq!(b.images.unwrap().shape(), &[2, 1, 4, 4, 4]);
        assert_eq!(b.masks.data(), &[0.0, 1.0]);
    }

    #[test]
    fn tabular_only_data_reads_no_volumes() {
        let mut f = fixture(3);
        f.plan.modalities.clear();
        f.plan.deterministic.clear();
        for r in &mut f.manifest.records {
            r.volume_paths.clear();
        }
        fs::remove_dir_all(f.dir.path().join("P000")).unwrap();
        let ds = build(&f, CacheKind::Cache, Stage::Train);
        let b = ds.load_batch(&[0, 1, 2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.images.is_none());
        assert_eq!(b.tabular.shape(), &[3, 1]);
        assert_eq!(ds.deterministic_computations(), 0);
    }
}
