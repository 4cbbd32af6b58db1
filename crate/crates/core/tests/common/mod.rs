//! Brute-force oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use falcon_core::data_io::{synth_patients, synth_source, PatientSynthSpec, SourceDataset, SyntheticCohort};
use falcon_core::geometry::{BinaryMask, PixelSet};
use falcon_core::network::NetworkConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    // Mix of sparse, dense and blob-like masks so every regime is covered.
    match rng.gen_range(0..4) {
        0 => {
            let p = rng.gen_range(0.0..0.2);
            BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p))
        }
        1 => {
            let p = rng.gen_range(0.5..1.0);
            BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p))
        }
        2 => {
            let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let r = rng.gen_range(0.5..(h.max(w) as f64 / 2.0).max(0.6));
            BinaryMask::from_fn(h, w, |y, x| (y as f64 - cy).hypot(x as f64 - cx) <= r)
        }
        _ => {
            let p = rng.gen_range(0.0..1.0);
            BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p))
        }
    }
}

pub fn nonempty_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = random_mask(rng, h, w);
    if m.is_empty() {
        m.set(rng.gen_range(0..h), rng.gen_range(0..w), true);
    }
    m
}

fn object_pixels(m: &BinaryMask) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                v.push((r, c));
            }
        }
    }
    v
}

fn dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

/// Distance from every pixel to the nearest object pixel, by exhaustive
/// search. `None` for a mask without object pixels.
pub fn brute_distance_transform(m: &BinaryMask) -> Option<Vec<f64>> {
    let objects = object_pixels(m);
    if objects.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(m.height() * m.width());
    for r in 0..m.height() {
        for c in 0..m.width() {
            out.push(objects.iter().map(|&o| dist((r, c), o)).fold(f64::INFINITY, f64::min));
        }
    }
    Some(out)
}

pub fn brute_dsc(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            inter += (x && y) as usize;
            na += x as usize;
            nb += y as usize;
        }
    }
    (na + nb > 0).then(|| 2.0 * inter as f64 / (na + nb) as f64)
}

/// Object pixels touching the background through a 4-neighbour, or
/// lying on the image border.
pub fn brute_boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = m.shape();
    object_pixels(m)
        .into_iter()
        .filter(|&(r, c)| {
            let neighbours = [(r as isize - 1, c as isize), (r as isize + 1, c as isize), (r as isize, c as isize - 1), (r as isize, c as isize + 1)];
            neighbours
                .iter()
                .any(|&(y, x)| y < 0 || x < 0 || y >= h as isize || x >= w as isize || !m.get(y as usize, x as usize))
        })
        .collect()
}

pub fn brute_directed(u: &[(usize, usize)], v: &[(usize, usize)]) -> Vec<f64> {
    u.iter()
        .map(|&a| v.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Linear interpolation between closest ranks, rank = p/100 * (n - 1).
pub fn brute_percentile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 {
        s[lo]
    } else {
        s[lo] * (1.0 - frac) + s[lo + 1] * frac
    }
}

pub fn pixel_set(m: &BinaryMask, pixels: Vec<(usize, usize)>) -> PixelSet {
    PixelSet::new(m.height(), m.width(), pixels).unwrap()
}

/// Small U-Net used across the tests: 32x32 input, three levels.
pub fn toy_net(k: usize) -> NetworkConfig {
    NetworkConfig {
        depth: 3,
        channels_per_level: vec![8, 16, 32],
        bottleneck_channels: 32,
        input_size: [32, 32],
        support_size: k,
        ..NetworkConfig::default()
    }
}

pub fn toy_source(seed: u64) -> SourceDataset {
    synth_source(4, 8, 32, seed).unwrap()
}

pub fn toy_cohort(seed: u64) -> SyntheticCohort {
    synth_patients(&PatientSynthSpec {
        n_train: 3,
        n_val: 1,
        n_test: 2,
        slices_per_patient: 12,
        size: 32,
        seed,
        ..PatientSynthSpec::default()
    })
    .unwrap()
}
