//! Synthetic cohort: int16 CT-like noise volumes with a bright sphere in
//! positive patients, one noise feature and an overall-survival endpoint whose
//! hazard grows with the sphere radius.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::volume_io::write_array;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    /// Share of patients in the held-out test split.
    pub test_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n: 60, shape: [16, 16, 16], seed: 0, test_fraction: 0.2 }
    }
}

pub const SPHERE_HU: f64 = 300.0;
pub const NOISE_HU: f64 = 40.0;
pub const FOLLOW_UP: f64 = 60.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPatient {
    pub id: String,
    pub test: bool,
    pub label: u8,
    /// Zero when there is no sphere.
    pub radius: f64,
    pub os_event: u8,
    pub os_months: f64,
    pub noise: f64,
}

/// Draws the per-patient ground truth without touching the filesystem.
pub fn sample_cohort(spec: &SyntheticSpec) -> Vec<SyntheticPatient> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<u8> = (0..spec.n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let n_test = (spec.test_fraction * spec.n as f64).round() as usize;
    let mut test: Vec<bool> = (0..spec.n).map(|i| i < n_test).collect();
    test.shuffle(&mut rng);
    let max_r = ((spec.shape.iter().min().copied().unwrap_or(0) as f64 - 1.0) / 2.0 - 1.0).clamp(1.0, 6.0);
    let min_r = max_r.min(2.0);
    let jitter = LogNormal::new(0.0, 0.15).expect("valid lognormal");
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    (0..spec.n)
        .map(|i| {
            let label = labels[i];
            let (radius, os_event, os_months) = if label == 1 {
                let r = rng.gen_range(min_r..=max_r);
                let t = FOLLOW_UP * (-0.35 * r).exp() * jitter.sample(&mut rng);
                if rng.gen_bool(0.15) {
                    (r, 0, t * rng.gen_range(0.5..1.0))
                } else {
                    (r, 1, t)
                }
            } else {
                (0.0, 0, FOLLOW_UP)
            };
            SyntheticPatient {
                id: format!("P{:04}", i + 1),
                test: test[i],
                label,
                radius,
                os_event,
                os_months: (os_months * 1000.0).round() / 1000.0,
                noise: (noise.sample(&mut rng) * 1000.0_f64).round() / 1000.0,
            }
        })
        .collect()
}

/// Renders one volume: N(0, 40) background plus a 300 HU sphere of `radius`.
pub fn render_volume(shape: [usize; 3], radius: f64, rng: &mut impl Rng) -> Vec<i16> {
    let bg = Normal::new(0.0, NOISE_HU).expect("valid normal");
    let center: [f64; 3] = std::array::from_fn(|a| {
        let lo = radius.ceil();
        let hi = shape[a] as f64 - 1.0 - radius.ceil();
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            (shape[a] as f64 - 1.0) / 2.0
        }
    });
    let mut out = Vec::with_capacity(shape.iter().product());
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let d2 = (i as f64 - center[0]).powi(2) + (j as f64 - center[1]).powi(2) + (k as f64 - center[2]).powi(2);
                let inside = radius > 0.0 && d2 <= radius * radius;
                let v = bg.sample(rng) + if inside { SPHERE_HU } else { 0.0 };
                out.push(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
            }
        }
    }
    out
}

const CONFIG_TEMPLATE: &str = "\
experiment_name: synthetic
output_dir: runs
data:
  csv_path: clinical.csv
  data_root: volumes
  modalities: [CT]
  tabular_features: [noise]
  labels:
    - {name: label, kind: binary}
    - {name: os, kind: event, unit: months}
  stratify_on: [label]
preprocessing:
  clip_normalize:
    - {modality: CT, a_min: -200.0, a_max: 400.0, b_min: 0.0, b_max: 1.0}
augmentation:
  flip: {enabled: true, p: 0.5, axes: [0, 1, 2]}
dataset:
  strategy: cache
  batch_size: 8
model:
  architecture: resnet
  size: 10
training:
  K: 3
  epochs: 30
  early_stopping: {patience: 10, monitor: val_loss}
  optimizer: {name: adam, lr: 0.001}
";

/// Writes `clinical.csv`, `volumes/<id>/CT.npy` and a ready-to-run `config.yaml`
/// under `out`. The same spec always produces byte-identical files.
pub fn make_synthetic(out: &Path, spec: &SyntheticSpec) -> io::Result<PathBuf> {
    let cohort = sample_cohort(spec);
    let vol_root = out.join("volumes");
    fs::create_dir_all(&vol_root)?;
    let mut csv = String::from("PatientID,Split,label,os_event,os_months,noise\n");
    for (i, p) in cohort.iter().enumerate() {
        let split = if p.test { "test" } else { "train_val" };
        csv.push_str(&format!("{},{split},{},{},{},{}\n", p.id, p.label, p.os_event, p.os_months, p.noise));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let vol = render_volume(spec.shape, p.radius, &mut rng);
        let dir = vol_root.join(&p.id);
        fs::create_dir_all(&dir)?;
        write_array(&dir.join("CT.npy"), &spec.shape, &vol)?;
    }
    fs::write(out.join("clinical.csv"), csv)?;
    let config = out.join("config.yaml");
    fs::write(&config, CONFIG_TEMPLATE)?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::read_volume;

    #[test]
    fn cohort_is_balanced_and_survival_tracks_radius() {
        let c = sample_cohort(&SyntheticSpec { n: 200, ..Default::default() });
        assert_eq!(c.iter().filter(|p| p.label == 1).count(), 100);
        assert_eq!(c.iter().filter(|p| p.test).count(), 40);
        for p in &c {
            if p.label == 0 {
                assert_eq!((p.radius, p.os_event, p.os_months), (0.0, 0, FOLLOW_UP));
            } else {
                assert!((2.0..=6.0).contains(&p.radius));
            }
        }
        let events: Vec<&SyntheticPatient> = c.iter().filter(|p| p.os_event == 1).collect();
        let concordant = events.iter().flat_map(|a| events.iter().map(move |b| (a, b))).filter(|(a, b)| a.radius > b.radius).filter(|(a, b)| a.os_months < b.os_months).count();
        let pairs = events.iter().flat_map(|a| events.iter().map(move |b| (a, b))).filter(|(a, b)| a.radius > b.radius).count();
        assert!(concordant as f64 / pairs as f64 > 0.8);
    }

    #[test]
    fn sphere_is_bright() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let with = render_volume([16, 16, 16], 4.0, &mut rng);
        let without = render_volume([16, 16, 16], 0.0, &mut rng);
        let bright = |v: &[i16]| v.iter().filter(|&&x| x > 150).count();
        assert!(bright(&with) > 200);
        assert!(bright(&without) < 5);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SyntheticSpec { n: 6, shape: [8, 8, 8], seed: 7, test_fraction: 0.2 };
        make_synthetic(a.path(), &spec).unwrap();
        make_synthetic(b.path(), &spec).unwrap();
        for rel in ["clinical.csv", "config.yaml", "volumes/P0003/CT.npy"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        assert_eq!(read_volume(&a.path().join("volumes/P0001/CT.npy")).unwrap().shape, [8, 8, 8]);
    }
}
