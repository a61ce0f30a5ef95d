//! Deterministic preprocessing and random augmentation of volumes.
//!
//! Deterministic steps act on single-modality [`Volume`]s and are keyed by
//! modality name. Random steps act on the channel-stacked [`Image`] and apply
//! one spatial transform to every channel.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{LabelKind, Settings};
use crate::dataset::Sample;
use crate::volume_io::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("crop target {target:?} exceeds volume shape {shape:?}")]
    TargetTooLarge { shape: [usize; 3], target: [usize; 3] },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Channel-first image `(C, d0, d1, d2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Image {
    pub fn stack(volumes: Vec<Volume>) -> Result<Self, TransformError> {
        let shape = volumes.first().map(|v| v.shape).ok_or_else(|| TransformError::ShapeMismatch("no channels".into()))?;
        if let Some(v) = volumes.iter().find(|v| v.shape != shape) {
            return Err(TransformError::ShapeMismatch(format!("channel shapes {:?} and {:?} differ", shape, v.shape)));
        }
        let channels = volumes.len();
        let data = volumes.into_iter().flat_map(|v| v.data).collect();
        Ok(Self { channels, shape, data })
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    fn map_channels(&self, shape: [usize; 3], mut f: impl FnMut(&[f32], &mut [f32])) -> Image {
        let n_out: usize = shape.iter().product();
        let mut data = vec![0.0; self.channels * n_out];
        for c in 0..self.channels {
            f(self.channel(c), &mut data[c * n_out..(c + 1) * n_out]);
        }
        Image { channels: self.channels, shape, data }
    }
}

pub fn clip_normalize(v: &Volume, a_min: f64, a_max: f64, b_min: f64, b_max: f64) -> Volume {
    let scale = (b_max - b_min) / (a_max - a_min);
    let data = v
        .data
        .iter()
        .map(|&x| {
            let c = (x as f64).clamp(a_min, a_max);
            ((c - a_min) * scale + b_min).clamp(b_min, b_max) as f32
        })
        .collect();
    Volume::new(v.shape, data)
}

/// Voxels whose value is a key of `mapping` take the mapped value; all others become 0.
pub fn value_map(v: &Volume, mapping: &[(f64, f64)]) -> Volume {
    let data = v
        .data
        .iter()
        .map(|&x| mapping.iter().find(|(from, _)| *from == x as f64).map_or(0.0, |(_, to)| *to as f32))
        .collect();
    Volume::new(v.shape, data)
}

fn crop(src: &[f32], shape: [usize; 3], start: [usize; 3], target: [usize; 3], out: &mut [f32]) {
    let mut o = 0;
    for i in 0..target[0] {
        for j in 0..target[1] {
            let row = ((start[0] + i) * shape[1] + start[1] + j) * shape[2] + start[2];
            out[o..o + target[2]].copy_from_slice(&src[row..row + target[2]]);
            o += target[2];
        }
    }
}

fn check_target(shape: [usize; 3], target: [usize; 3]) -> Result<(), TransformError> {
    if (0..3).any(|a| target[a] > shape[a] || target[a] == 0) {
        return Err(TransformError::TargetTooLarge { shape, target });
    }
    Ok(())
}

/// Crops the centered window; odd slack leaves the extra voxel after the window.
pub fn center_crop(v: &Volume, target: [usize; 3]) -> Result<Volume, TransformError> {
    check_target(v.shape, target)?;
    let start = [0, 1, 2].map(|a| (v.shape[a] - target[a]) / 2);
    let mut out = vec![0.0; target.iter().product()];
    crop(&v.data, v.shape, start, target, &mut out);
    Ok(Volume::new(target, out))
}

pub fn random_crop<R: Rng + ?Sized>(img: &Image, target: [usize; 3], rng: &mut R) -> Result<Image, TransformError> {
    check_target(img.shape, target)?;
    let start = [0, 1, 2].map(|a| rng.gen_range(0..=img.shape[a] - target[a]));
    Ok(img.map_channels(target, |src, out| crop(src, img.shape, start, target, out)))
}

/// Reverses `img` along one spatial axis.
pub fn flip(img: &Image, axis: usize) -> Image {
    let s = img.shape;
    img.map_channels(s, |src, out| {
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let mut idx = [i, j, k];
                    idx[axis] = s[axis] - 1 - idx[axis];
                    out[(i * s[1] + j) * s[2] + k] = src[(idx[0] * s[1] + idx[1]) * s[2] + idx[2]];
                }
            }
        }
    })
}

/// Flips each listed axis independently with probability `p`.
pub fn random_flip<R: Rng + ?Sized>(img: &Image, axes: &[usize], p: f64, rng: &mut R) -> Image {
    let mut out = img.clone();
    for &axis in axes {
        if rng.gen_bool(p) {
            out = flip(&out, axis);
        }
    }
    out
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Resamples every channel at `source = m (p - c) + c + offset` for each output
/// voxel `p`, where `c` is the volume center. Trilinear, zero outside the volume.
pub fn resample(img: &Image, m: &Mat3, offset: [f64; 3]) -> Image {
    if *m == IDENTITY && offset == [0.0; 3] {
        return img.clone();
    }
    let s = img.shape;
    let c = s.map(|n| (n as f64 - 1.0) / 2.0);
    img.map_channels(s, |src, out| {
        let at = |i: isize, j: isize, k: isize| -> f64 {
            if i < 0 || j < 0 || k < 0 || i >= s[0] as isize || j >= s[1] as isize || k >= s[2] as isize {
                0.0
            } else {
                src[(i as usize * s[1] + j as usize) * s[2] + k as usize] as f64
            }
        };
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let d = [i as f64 - c[0], j as f64 - c[1], k as f64 - c[2]];
                    let q: [f64; 3] = [0, 1, 2].map(|a| m[a][0] * d[0] + m[a][1] * d[1] + m[a][2] * d[2] + c[a] + offset[a]);
                    let f = q.map(f64::floor);
                    let (i0, j0, k0) = (f[0] as isize, f[1] as isize, f[2] as isize);
                    let (u, v, w) = (q[0] - f[0], q[1] - f[1], q[2] - f[2]);
                    let mut acc = 0.0;
                    for (di, wi) in [(0, 1.0 - u), (1, u)] {
                        for (dj, wj) in [(0, 1.0 - v), (1, v)] {
                            for (dk, wk) in [(0, 1.0 - w), (1, w)] {
                                let weight = wi * wj * wk;
                                if weight != 0.0 {
                                    acc += weight * at(i0 + di, j0 + dj, k0 + dk);
                                }
                            }
                        }
                    }
                    out[(i * s[1] + j) * s[2] + k] = acc as f32;
                }
            }
        }
    })
}

/// Rotation about the three axes by the given angles in degrees.
pub fn rotation_matrix(degrees: [f64; 3]) -> Mat3 {
    let [a, b, g] = degrees.map(f64::to_radians);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[g.cos(), -g.sin(), 0.0], [g.sin(), g.cos(), 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

pub fn rotate(img: &Image, degrees: [f64; 3]) -> Image {
    resample(img, &rotation_matrix(degrees), [0.0; 3])
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

pub fn random_rotate<R: Rng + ?Sized>(img: &Image, max_degrees: [f64; 3], p: f64, rng: &mut R) -> Image {
    if !rng.gen_bool(p) {
        return img.clone();
    }
    let angles = max_degrees.map(|m| symmetric(rng, m));
    rotate(img, angles)
}

/// Random scaling, shear and translation. `translate` is a fraction of each
/// axis length, `scale` the relative scale range and `shear` the largest
/// off-diagonal coefficient.
pub fn random_affine<R: Rng + ?Sized>(img: &Image, translate: f64, scale: f64, shear: f64, p: f64, rng: &mut R) -> Image {
    if !rng.gen_bool(p) {
        return img.clone();
    }
    let mut m = IDENTITY;
    for (a, row) in m.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = if a == b { 1.0 + symmetric(rng, scale) } else { symmetric(rng, shear) };
        }
    }
    let offset = [0, 1, 2].map(|a| symmetric(rng, translate * img.shape[a] as f64));
    resample(img, &m, offset)
}

pub fn gaussian_noise<R: Rng + ?Sized>(img: &Image, std: f64, p: f64, rng: &mut R) -> Image {
    if std <= 0.0 || !rng.gen_bool(p) {
        return img.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = img.data.iter().map(|&x| x + normal.sample(rng) as f32).collect();
    Image { data, ..img.clone() }
}

/// Convex combination `lambda * a + (1 - lambda) * b` of two samples.
///
/// Binary labels mix when both are observed and are masked otherwise; event
/// labels and their masks are taken from `a` unchanged.
pub fn mixup_with(a: &Sample, b: &Sample, lambda: f64, kinds: &[LabelKind]) -> Result<Sample, TransformError> {
    let mismatch = |what: &str| TransformError::ShapeMismatch(format!("mixup {what} differ between '{}' and '{}'", a.patient_id, b.patient_id));
    if a.tabular.len() != b.tabular.len() || a.labels.len() != b.labels.len() || a.labels.len() != kinds.len() {
        return Err(mismatch("feature or label counts"));
    }
    let l = lambda as f32;
    let mix = |x: &[f32], y: &[f32]| -> Vec<f32> { x.iter().zip(y).map(|(&p, &q)| l * p + (1.0 - l) * q).collect() };
    let image = match (&a.image, &b.image) {
        (Some(x), Some(y)) if x.shape == y.shape && x.channels == y.channels => Some(Image { data: mix(&x.data, &y.data), ..x.clone() }),
        (None, None) => None,
        _ => return Err(mismatch("image shapes")),
    };
    let mut out = Sample { image, tabular: mix(&a.tabular, &b.tabular), ..a.clone() };
    for (e, kind) in kinds.iter().enumerate() {
        if *kind == LabelKind::Binary {
            if a.mask[e] && b.mask[e] {
                out.labels[e] = l * a.labels[e] + (1.0 - l) * b.labels[e];
            } else {
                out.mask[e] = false;
            }
        }
    }
    Ok(out)
}

pub fn mixup<R: Rng + ?Sized>(a: &Sample, b: &Sample, alpha: f64, kinds: &[LabelKind], rng: &mut R) -> Result<Sample, TransformError> {
    let beta = Beta::new(alpha, alpha).map_err(|e| TransformError::ShapeMismatch(format!("mixup alpha: {e}")))?;
    mixup_with(a, b, beta.sample(rng), kinds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum DeterministicStep {
    ClipNormalize { modality: String, a_min: f64, a_max: f64, b_min: f64, b_max: f64 },
    ValueMap { modality: String, mapping: Vec<(f64, f64)> },
    CenterCrop([usize; 3]),
}

#[derive(Clone, Debug, PartialEq)]
pub enum RandomStep {
    Crop([usize; 3]),
    Flip { axes: Vec<usize>, p: f64 },
    Affine { p: f64, translate: f64, scale: f64, shear: f64 },
    Rotate { p: f64, max_degrees: [f64; 3] },
    Noise { p: f64, std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Eval,
}

/// Ordered preprocessing and augmentation for one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformPlan {
    pub modalities: Vec<String>,
    pub deterministic: Vec<DeterministicStep>,
    pub random: Vec<RandomStep>,
    pub mixup_alpha: Option<f64>,
}

fn shape3(v: &[usize]) -> Option<[usize; 3]> {
    (v.len() == 3).then(|| [v[0], v[1], v[2]])
}

impl TransformPlan {
    pub fn from_settings(s: &Settings) -> Self {
        let p = &s.preprocessing;
        let mut deterministic = Vec::new();
        for v in &p.value_map {
            deterministic.push(DeterministicStep::ValueMap {
                modality: v.modality.clone(),
                mapping: v.mapping.iter().map(|e| (e.from, e.to)).collect(),
            });
        }
        for c in &p.clip_normalize {
            deterministic.push(DeterministicStep::ClipNormalize {
                modality: c.modality.clone(),
                a_min: c.a_min,
                a_max: c.a_max,
                b_min: c.b_min,
                b_max: c.b_max,
            });
        }
        if let Some(t) = shape3(&p.crop_size) {
            deterministic.push(DeterministicStep::CenterCrop(t));
        }
        let a = &s.augmentation;
        let mut random = Vec::new();
        if a.enabled {
            if let Some(t) = shape3(&a.random_crop) {
                random.push(RandomStep::Crop(t));
            }
            if a.flip.enabled {
                random.push(RandomStep::Flip { axes: a.flip.axes.clone(), p: a.flip.p });
            }
            if a.affine.enabled {
                random.push(RandomStep::Affine { p: a.affine.p, translate: a.affine.translate, scale: a.affine.scale, shear: a.affine.shear });
            }
            if a.rotate.enabled {
                let d = &a.rotate.max_degrees;
                random.push(RandomStep::Rotate { p: a.rotate.p, max_degrees: [d[0], d[1], d[2]] });
            }
            if a.gaussian_noise.enabled {
                random.push(RandomStep::Noise { p: a.gaussian_noise.p, std: a.gaussian_noise.std });
            }
        }
        let mixup_alpha = (a.enabled && a.mixup.enabled).then_some(a.mixup.alpha);
        Self { modalities: s.data.modalities.clone(), deterministic, random, mixup_alpha }
    }

    /// Hex digest identifying the deterministic part of the plan.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(&(&self.modalities, &self.deterministic)).expect("plan serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }

    /// Applies the deterministic steps to per-modality volumes (in configured order) and stacks them.
    pub fn preprocess(&self, volumes: Vec<Volume>) -> Result<Image, TransformError> {
        if volumes.len() != self.modalities.len() {
            return Err(TransformError::ShapeMismatch(format!("expected {} modalities, got {}", self.modalities.len(), volumes.len())));
        }
        let mut volumes = volumes;
        for step in &self.deterministic {
            for (v, name) in volumes.iter_mut().zip(&self.modalities) {
                *v = match step {
                    DeterministicStep::ClipNormalize { modality, a_min, a_max, b_min, b_max } if modality == name => {
                        clip_normalize(v, *a_min, *a_max, *b_min, *b_max)
                    }
                    DeterministicStep::ValueMap { modality, mapping } if modality == name => value_map(v, mapping),
                    DeterministicStep::CenterCrop(t) => center_crop(v, *t)?,
                    _ => continue,
                };
            }
        }
        Image::stack(volumes)
    }

    /// Applies the random steps in order.
    pub fn augment<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image, TransformError> {
        let mut out = img.clone();
        for step in &self.random {
            out = match step {
                RandomStep::Crop(t) => random_crop(&out, *t, rng)?,
                RandomStep::Flip { axes, p } => random_flip(&out, axes, *p, rng),
                RandomStep::Affine { p, translate, scale, shear } => random_affine(&out, *translate, *scale, *shear, *p, rng),
                RandomStep::Rotate { p, max_degrees } => random_rotate(&out, *max_degrees, *p, rng),
                RandomStep::Noise { p, std } => gaussian_noise(&out, *std, *p, rng),
            };
        }
        Ok(out)
    }

    /// Full chain: deterministic steps always, random steps only in training.
    pub fn apply<R: Rng + ?Sized>(&self, volumes: Vec<Volume>, stage: Stage, rng: &mut R) -> Result<Image, TransformError> {
        let img = self.preprocess(volumes)?;
        match stage {
            Stage::Eval => Ok(img),
            Stage::Train => self.augment(&img, rng),
        }
    }
}
