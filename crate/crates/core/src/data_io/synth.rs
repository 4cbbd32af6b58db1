//! Seeded synthetic stand-ins for the two domains: a multi-class shape
//! dataset for meta-training and grayscale patient volumes with a smoothly
//! deforming organ for fine-tuning and evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{min_max_normalize, PatientVolume, Sample, SealedMasks, SourceClass, SourceDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::nn::Tensor;

pub const SHAPE_FAMILIES: [&str; 10] = [
    "ellipse", "rectangle", "ring", "triangle", "star", "cross", "crescent", "hexagon", "diamond", "heart",
];

/// Membership test for shape family `f` in local coordinates, where the
/// shape fits inside the unit disc.
fn inside(f: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let theta = v.atan2(u);
    match f {
        0 => (u / 0.95).powi(2) + (v / 0.6).powi(2) <= 1.0,
        1 => u.abs() <= 0.75 && v.abs() <= 0.5,
        2 => (0.45..=0.9).contains(&r),
        3 => regular_polygon(u, v, 3, 0.9),
        4 => {
            let k = (2.5 * theta).cos().abs();
            r <= 0.4 + 0.5 * k.powi(3)
        }
        5 => (u.abs() <= 0.25 && v.abs() <= 0.85) || (v.abs() <= 0.25 && u.abs() <= 0.85),
        6 => r <= 0.85 && ((u - 0.35).powi(2) + v * v).sqrt() > 0.6,
        7 => regular_polygon(u, v, 6, 0.85),
        8 => u.abs() / 0.9 + v.abs() / 0.6 <= 1.0,
        _ => {
            let (x, y) = (u / 0.75, -v / 0.75 + 0.1);
            (x * x + y * y - 1.0).powi(3) - x * x * y.powi(3) <= 0.0
        }
    }
}

fn regular_polygon(u: f64, v: f64, sides: usize, radius: f64) -> bool {
    let apothem = radius * (PI / sides as f64).cos();
    (0..sides).all(|k| {
        let a = 2.0 * PI * k as f64 / sides as f64 - PI / 2.0;
        u * a.cos() + v * a.sin() <= apothem
    })
}

/// Renders one sample; the shape is fully inside the image.
fn render_shape(rng: &mut ChaCha8Rng, family: usize, variant: usize, size: usize) -> Sample {
    let s = size as f64;
    let aspect = 1.0 + 0.25 * (variant % 3) as f64;
    loop {
        let scale = rng.gen_range(0.22..0.36) * s / aspect;
        let reach = scale * aspect + 1.0;
        let cx = rng.gen_range(reach..(s - reach).max(reach + 1e-6));
        let cy = rng.gen_range(reach..(s - reach).max(reach + 1e-6));
        let rot = rng.gen_range(0.0..2.0 * PI);
        let (sin, cos) = rot.sin_cos();
        let mask = BinaryMask::from_fn(size, size, |r, c| {
            let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
            let u = (dx * cos + dy * sin) / (scale * aspect);
            let v = (-dx * sin + dy * cos) / scale;
            inside(family, u, v)
        });
        if mask.is_empty() {
            continue;
        }
        let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..1.0));
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.65));
        let (fx, fy, phase) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.0..2.0 * PI));
        let fg_tex = rng.gen_range(0.05..0.2);
        let bg_noise = rng.gen_range(0.02..0.15);
        let plane = size * size;
        let mut data = vec![0.0f32; 3 * plane];
        for r in 0..size {
            for c in 0..size {
                let i = r * size + c;
                let tex = (fx * c as f64 + fy * r as f64 + phase).sin();
                let noise: f64 = rng.gen_range(-1.0..1.0);
                for ch in 0..3 {
                    let v = if mask.get(r, c) {
                        fg[ch] + fg_tex * tex
                    } else {
                        bg[ch] + bg_noise * noise
                    };
                    data[ch * plane + i] = v as f32;
                }
            }
        }
        min_max_normalize(&mut data);
        return Sample {
            image: Tensor::from_vec([1, 3, size, size], data).expect("sized"),
            mask,
        };
    }
}

/// A colour shape dataset with `n_classes` classes; class `c` uses family
/// `c mod 10` with an aspect variant `c / 10`.
pub fn synth_source(n_classes: usize, samples_per_class: usize, size: usize, seed: u64) -> Result<SourceDataset> {
    if n_classes < 2 {
        return Err(Error::InvalidConfig(format!("source needs at least 2 classes, got {n_classes}")));
    }
    if size < 8 {
        return Err(Error::InvalidConfig(format!("image size {size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = (0..n_classes)
        .map(|c| {
            let family = c % SHAPE_FAMILIES.len();
            let variant = c / SHAPE_FAMILIES.len();
            let name = if variant == 0 {
                SHAPE_FAMILIES[family].to_string()
            } else {
                format!("{}_{variant}", SHAPE_FAMILIES[family])
            };
            let samples = (0..samples_per_class)
                .map(|_| render_shape(&mut rng, family, variant, size))
                .collect();
            SourceClass { name, samples }
        })
        .collect();
    Ok(SourceDataset {
        name: "synthetic-source".into(),
        classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatientSynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub slices_per_patient: usize,
    pub labeled_fraction: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for PatientSynthSpec {
    fn default() -> Self {
        Self {
            n_train: 8,
            n_val: 2,
            n_test: 3,
            slices_per_patient: 30,
            labeled_fraction: 0.4,
            size: 64,
            seed: 0,
        }
    }
}

impl PatientSynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "labeled_fraction must be in (0, 1), got {}",
                self.labeled_fraction
            )));
        }
        if self.slices_per_patient < 2 {
            return Err(Error::InvalidConfig("need at least 2 slices per patient".into()));
        }
        if self.size < 8 {
            return Err(Error::InvalidConfig(format!("image size {} too small", self.size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub volumes: Vec<PatientVolume>,
    /// Masks for every slice of validation and test patients.
    pub sealed: SealedMasks,
}

/// Evenly interleaved labeled positions: `round(n * fraction)` of them
/// (at least one, at most `n - 1`), the `j`-th at `floor((j + 0.5) n / n_l)`.
pub fn labeled_indices(n: usize, fraction: f64) -> Vec<usize> {
    let n_l = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    (0..n_l).map(|j| ((j as f64 + 0.5) * n as f64 / n_l as f64).floor() as usize).collect()
}

struct Organ {
    radius: f64,
    center: (f64, f64),
    drift: (f64, f64),
    phase: f64,
    harmonics: [(f64, f64, f64); 2],
    organ_level: f64,
    background_level: f64,
    noise: f64,
    stripe: (f64, f64, f64),
    /// Neighbouring structures with organ-like intensity that are not part
    /// of the target: (centre x, centre y, radius, level).
    distractors: Vec<(f64, f64, f64, f64)>,
}

/// Per-slice change rates. With these, adjacent slices move the organ
/// boundary by a small fraction of a pixel at the sizes used here.
const RADIUS_RATE: f64 = 0.12;
const SHAPE_RATE: f64 = 0.1;

impl Organ {
    fn sample(rng: &mut ChaCha8Rng, size: f64) -> Self {
        Organ {
            radius: size * rng.gen_range(0.17..0.24),
            center: (
                size * (0.5 + rng.gen_range(-0.06..0.06)),
                size * (0.5 + rng.gen_range(-0.06..0.06)),
            ),
            drift: (
                size * rng.gen_range(-0.0012..0.0012),
                size * rng.gen_range(-0.0012..0.0012),
            ),
            phase: rng.gen_range(0.0..2.0 * PI),
            harmonics: std::array::from_fn(|_| {
                (rng.gen_range(0.0..0.12), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI))
            }),
            organ_level: rng.gen_range(0.5..0.85),
            background_level: rng.gen_range(0.1..0.4),
            noise: rng.gen_range(0.03..0.1),
            stripe: (rng.gen_range(0.05..0.4), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..0.08)),
            distractors: (0..rng.gen_range(1..=2))
                .map(|_| {
                    let angle = rng.gen_range(0.0..2.0 * PI);
                    let dist = size * rng.gen_range(0.36..0.42);
                    (
                        size * 0.5 + dist * angle.cos(),
                        size * 0.5 + dist * angle.sin(),
                        size * rng.gen_range(0.07..0.11),
                        rng.gen_range(0.45..0.8),
                    )
                })
                .collect(),
        }
    }

    fn mask(&self, i: usize, size: usize) -> BinaryMask {
        let t = i as f64;
        let r0 = self.radius * (0.85 + 0.15 * (RADIUS_RATE * t + self.phase).sin());
        let cx = self.center.0 + self.drift.0 * t;
        let cy = self.center.1 + self.drift.1 * t;
        let amps: Vec<(f64, f64)> = self
            .harmonics
            .iter()
            .map(|&(a, p, q)| (a * (0.5 + 0.5 * (SHAPE_RATE * t + q).sin()), p))
            .collect();
        BinaryMask::from_fn(size, size, |r, c| {
            let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
            let theta = dy.atan2(dx);
            let bound = r0
                * (1.0
                    + amps[0].0 * (2.0 * theta + amps[0].1).cos()
                    + amps[1].0 * (3.0 * theta + amps[1].1).cos());
            (dx * dx + dy * dy).sqrt() <= bound
        })
    }

    fn image(&self, rng: &mut ChaCha8Rng, mask: &BinaryMask, size: usize) -> Tensor {
        let plane = size * size;
        let mut gray = vec![0.0f32; plane];
        let (freq, phase, amp) = self.stripe;
        for r in 0..size {
            for c in 0..size {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let near = self
                    .distractors
                    .iter()
                    .find(|d| (x - d.0).hypot(y - d.1) <= d.2);
                let base = match (mask.get(r, c), near) {
                    (true, _) => self.organ_level,
                    (false, Some(d)) => d.3,
                    (false, None) => self.background_level + 0.1 * (r as f64 / size as f64),
                };
                let v = base
                    + amp * (freq * (r + c) as f64 + phase).sin()
                    + self.noise * rng.gen_range(-1.0..1.0);
                gray[r * size + c] = v as f32;
            }
        }
        min_max_normalize(&mut gray);
        let mut data = Vec::with_capacity(3 * plane);
        for _ in 0..3 {
            data.extend_from_slice(&gray);
        }
        Tensor::from_vec([1, 3, size, size], data).expect("sized")
    }
}

/// Generates train, validation and test patients in that order. Masks of
/// the labeled subset are attached to each volume; validation and test
/// patients also get every slice's mask in the sealed store.
pub fn synth_patients(spec: &PatientSynthSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let splits = std::iter::repeat(Split::Train)
        .take(spec.n_train)
        .chain(std::iter::repeat(Split::Val).take(spec.n_val))
        .chain(std::iter::repeat(Split::Test).take(spec.n_test));
    let n = spec.slices_per_patient;
    let labeled = labeled_indices(n, spec.labeled_fraction);
    let mut volumes = Vec::new();
    let mut sealed = SealedMasks::new();
    for (k, split) in splits.enumerate() {
        let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
        let organ = Organ::sample(&mut prng, spec.size as f64);
        let id = format!("p{k:03}");
        let masks: Vec<BinaryMask> = (0..n).map(|i| organ.mask(i, spec.size)).collect();
        let slices = masks.iter().map(|m| organ.image(&mut prng, m, spec.size)).collect();
        let exposed: BTreeMap<usize, BinaryMask> = labeled.iter().map(|&i| (i, masks[i].clone())).collect();
        if split != Split::Train {
            sealed.insert(id.clone(), masks.into_iter().enumerate().collect());
        }
        volumes.push(PatientVolume {
            id,
            split,
            indices: (0..n).collect(),
            slices,
            masks: exposed,
        });
    }
    Ok(SyntheticCohort { volumes, sealed })
}
