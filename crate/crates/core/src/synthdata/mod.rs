//! Procedural multi-domain datasets standing in for real adaptation
//! benchmarks.
//!
//! * `BLOBS-3`: three domains of class-conditional Gaussians in 8-d, C = 4,
//!   each domain a different affine image of the same classes.
//! * `DIGITS-5`: five domains of 16×16 stroke-rendered digits, C = 10:
//!   clean, inverted, noisy background, rotated ±15° and low contrast.

mod augment;
pub mod glyphs;
mod io;

pub use augment::{augment, augment_batch, make_views, AugmentPolicy, Layout, ViewRole};
pub use io::{decode_dataset, encode_dataset, read_dataset, to_csv, write_dataset, DatasetError};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numgrad::Tensor;
use crate::rng::{stream_rng, Stream};

pub const UNLABELED: i32 = -1;

pub const BLOB_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub domain_id: u32,
    pub x: Vec<f32>,
    /// Class index, or [`UNLABELED`].
    pub label: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain_id: u32,
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<i32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Rows `idx` as an `f64` matrix.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend(self.samples[i].x.iter().map(|&v| v as f64));
        }
        Tensor::matrix(idx.len(), self.dim, data).unwrap()
    }

    pub fn all_inputs(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }

    /// Copy with every label replaced by [`UNLABELED`].
    pub fn unlabeled(&self) -> Dataset {
        let samples = self.samples.iter().map(|s| Sample { label: UNLABELED, ..s.clone() }).collect();
        Dataset { samples, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Blobs,
    Digits,
}

impl GeneratorKind {
    pub fn dim(self) -> usize {
        match self {
            GeneratorKind::Blobs => BLOB_DIM,
            GeneratorKind::Digits => glyphs::PIXELS,
        }
    }

    pub fn layout(self) -> Layout {
        match self {
            GeneratorKind::Blobs => Layout::Flat,
            GeneratorKind::Digits => Layout::Raster { width: glyphs::SIDE, height: glyphs::SIDE },
        }
    }
}

/// Per-domain corruption of a base raster.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RasterTransform {
    /// Each sample is rotated by `±rotation_deg`, sign drawn per sample.
    pub rotation_deg: f64,
    pub invert: bool,
    /// `x ← brightness + contrast·x` when `contrast != 0`.
    pub contrast: f64,
    pub brightness: f64,
    /// Amplitude of a random stripe/blob clutter pattern (0 = none).
    pub background: f64,
    pub noise_sigma: f64,
}

impl RasterTransform {
    pub const IDENTITY: RasterTransform = RasterTransform {
        rotation_deg: 0.0,
        invert: false,
        contrast: 0.0,
        brightness: 0.0,
        background: 0.0,
        noise_sigma: 0.0,
    };

    fn apply<R: Rng>(&self, img: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = img.to_vec();
        if self.rotation_deg != 0.0 {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            out = glyphs::rotate(&out, sign * self.rotation_deg, 0.0);
        }
        if self.background > 0.0 {
            let bg = clutter(&mut stream_rng(TEXTURE_SEED, Stream::Data, &[rng.gen_range(0..BACKGROUND_TEXTURES)]));
            for (o, b) in out.iter_mut().zip(bg) {
                *o = o.max(self.background * b);
            }
        }
        if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).unwrap();
            out.iter_mut().for_each(|o| *o = (*o + n.sample(rng)).clamp(0.0, 1.0));
        }
        if self.contrast != 0.0 {
            out.iter_mut().for_each(|o| *o = self.brightness + self.contrast * *o);
        }
        if self.invert {
            out.iter_mut().for_each(|o| *o = 1.0 - *o);
        }
        out
    }
}

/// Number of distinct background textures a cluttered domain draws from.
pub const BACKGROUND_TEXTURES: u64 = 1;
const TEXTURE_SEED: u64 = 0x7E87;

/// Oriented gratings plus a few soft blobs, values in `[0, 1]`.
fn clutter<R: Rng>(rng: &mut R) -> Vec<f64> {
    let side = glyphs::SIDE;
    let mut bg = vec![0.0; side * side];
    for _ in 0..2 {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let freq: f64 = rng.gen_range(0.5..1.3);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (s, c) = theta.sin_cos();
        for y in 0..side {
            for x in 0..side {
                let t = (c * x as f64 + s * y as f64) * freq + phase;
                bg[y * side + x] += 0.5 * (0.5 + 0.5 * t.sin());
            }
        }
    }
    for _ in 0..3 {
        let (cx, cy) = (rng.gen_range(0.0..side as f64), rng.gen_range(0.0..side as f64));
        let r: f64 = rng.gen_range(1.5..3.5);
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                bg[y * side + x] += (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
    bg.iter_mut().for_each(|v| *v = v.min(1.0));
    bg
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainTransform {
    Raster(RasterTransform),
    /// `x ← A·x + b` with `A` row-major `dim×dim`.
    Affine { matrix: Vec<f64>, offset: Vec<f64> },
}

impl DomainTransform {
    pub fn identity(kind: GeneratorKind) -> Self {
        match kind {
            GeneratorKind::Digits => DomainTransform::Raster(RasterTransform::IDENTITY),
            GeneratorKind::Blobs => {
                let d = BLOB_DIM;
                let mut matrix = vec![0.0; d * d];
                (0..d).for_each(|i| matrix[i * d + i] = 1.0);
                DomainTransform::Affine { matrix, offset: vec![0.0; d] }
            }
        }
    }

    fn apply<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        match self {
            DomainTransform::Raster(t) => t.apply(x, rng),
            DomainTransform::Affine { matrix, offset } => {
                let d = x.len();
                (0..d)
                    .map(|i| offset[i] + (0..d).map(|j| matrix[i * d + j] * x[j]).sum::<f64>())
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: &'static str,
    pub domain_id: u32,
    pub kind: GeneratorKind,
    pub classes: usize,
    pub samples: usize,
    pub transform: DomainTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Blobs3,
    Digits5,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Blobs3 => "blobs3",
            Suite::Digits5 => "digits5",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "blobs3" => Some(Suite::Blobs3),
            "digits5" => Some(Suite::Digits5),
            _ => None,
        }
    }

    pub fn kind(self) -> GeneratorKind {
        match self {
            Suite::Blobs3 => GeneratorKind::Blobs,
            Suite::Digits5 => GeneratorKind::Digits,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Suite::Blobs3 => 4,
            Suite::Digits5 => 10,
        }
    }

    pub fn domain_count(self) -> usize {
        match self {
            Suite::Blobs3 => 3,
            Suite::Digits5 => 5,
        }
    }

    /// Default adaptation target: the last blob domain, the cluttered digits.
    pub fn default_target(self) -> usize {
        match self {
            Suite::Blobs3 => 2,
            Suite::Digits5 => 2,
        }
    }

    pub fn domains(self, samples_per_domain: usize) -> Vec<DomainSpec> {
        let classes = self.classes();
        let kind = self.kind();
        let mk = |domain_id: u32, name, transform| DomainSpec {
            name,
            domain_id,
            kind,
            classes,
            samples: samples_per_domain,
            transform,
        };
        match self {
            Suite::Blobs3 => vec![
                mk(0, "blob-a", DomainTransform::identity(kind)),
                mk(1, "blob-b", blob_affine(0.6, 1.0, 0.6)),
                mk(2, "blob-c", blob_affine(1.1, 1.25, -0.8)),
            ],
            Suite::Digits5 => {
                let r = |t: RasterTransform| DomainTransform::Raster(t);
                let id = RasterTransform::IDENTITY;
                vec![
                    mk(0, "clean", r(id)),
                    mk(1, "inverted", r(RasterTransform { invert: true, ..id })),
                    mk(2, "cluttered", r(RasterTransform { background: 0.4, noise_sigma: 0.05, ..id })),
                    mk(3, "rotated", r(RasterTransform { rotation_deg: 15.0, ..id })),
                    mk(4, "low-contrast", r(RasterTransform { contrast: 0.3, brightness: 0.35, ..id })),
                ]
            }
        }
    }
}

/// Rotation by `angle` in each (2i, 2i+1) plane, scaled, plus a constant shift.
fn blob_affine(angle: f64, scale: f64, shift: f64) -> DomainTransform {
    let d = BLOB_DIM;
    let mut matrix = vec![0.0; d * d];
    for p in 0..d / 2 {
        let a = angle * (p + 1) as f64 / 2.0;
        let (s, c) = a.sin_cos();
        let (i, j) = (2 * p, 2 * p + 1);
        matrix[i * d + i] = scale * c;
        matrix[i * d + j] = -scale * s;
        matrix[j * d + i] = scale * s;
        matrix[j * d + j] = scale * c;
    }
    DomainTransform::Affine { matrix, offset: vec![shift; d] }
}

/// Class means shared by every blob domain (fixed, seed-independent).
pub fn blob_prototypes(classes: usize) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(0xB10B, Stream::Data, &[classes as u64]);
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..BLOB_DIM).map(|_| n.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| 2.5 * x / norm).collect()
        })
        .collect()
}

pub const BLOB_SIGMA: f64 = 0.6;

/// Stratified label sequence, shuffled: class counts differ by at most one.
fn stratified_labels<R: Rng>(n: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

/// Untransformed samples `(label, x)` for a domain.
pub fn generate_base(spec: &DomainSpec, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut rng = stream_rng(seed, Stream::Data, &[spec.domain_id as u64]);
    let labels = stratified_labels(spec.samples, spec.classes, &mut rng);
    match spec.kind {
        GeneratorKind::Digits => labels
            .into_iter()
            .map(|y| {
                let j = glyphs::Jitter::sample(&mut rng);
                (y, glyphs::render(y, &j))
            })
            .collect(),
        GeneratorKind::Blobs => {
            let protos = blob_prototypes(spec.classes);
            let n = Normal::new(0.0, BLOB_SIGMA).unwrap();
            labels
                .into_iter()
                .map(|y| (y, protos[y].iter().map(|m| m + n.sample(&mut rng)).collect()))
                .collect()
        }
    }
}

/// Deterministic dataset for `spec` under `seed`.
pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Dataset {
    let base = generate_base(spec, seed);
    let mut rng = stream_rng(seed, Stream::DomainTransform, &[spec.domain_id as u64]);
    let samples = base
        .into_iter()
        .map(|(y, x)| Sample {
            domain_id: spec.domain_id,
            x: spec.transform.apply(&x, &mut rng).into_iter().map(|v| v as f32).collect(),
            label: y as i32,
        })
        .collect();
    Dataset { domain_id: spec.domain_id, dim: spec.kind.dim(), classes: spec.classes, samples }
}

pub fn generate_suite(suite: Suite, samples_per_domain: usize, seed: u64) -> Vec<Dataset> {
    suite.domains(samples_per_domain).iter().map(|s| generate_domain(s, seed)).collect()
}
