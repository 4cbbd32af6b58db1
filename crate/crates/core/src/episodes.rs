//! Few-shot task construction: labeled source episodes, patient-specific
//! fine-tuning tasks and label-free inference tasks.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{PatientVolume, SourceDataset, Split};
use crate::error::{Error, Result};

/// One 1-way K-shot episode drawn from a single source class. Entries are
/// sample indices within that class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEpisode {
    pub class_id: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Fine-tuning task for one patient: unlabeled support slices and the
/// labeled slices as queries. Entries are slice positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetTask {
    pub patient_id: String,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Inference task: support slices and every slice of the volume as query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceTask {
    pub patient_id: String,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportSelection {
    #[default]
    Uniform,
    Random,
}

/// Uniformly samples a class, then disjoint support and query sets.
pub fn sample_source_episode<R: Rng>(ds: &SourceDataset, k: usize, q_n: usize, rng: &mut R) -> Result<SourceEpisode> {
    if ds.classes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if k == 0 || q_n == 0 {
        return Err(Error::InvalidConfig("episodes need K >= 1 and at least one query".into()));
    }
    let class_id = rng.gen_range(0..ds.classes.len());
    let class = &ds.classes[class_id];
    let needed = k + q_n;
    if class.samples.len() < needed {
        return Err(Error::InsufficientSamples {
            class_id: class.name.clone(),
            available: class.samples.len(),
            needed,
        });
    }
    let picks = sample(rng, class.samples.len(), needed).into_vec();
    Ok(SourceEpisode {
        class_id,
        support: picks[..k].to_vec(),
        query: picks[k..].to_vec(),
    })
}

/// `k` positions spread over `0..n` with both endpoints included:
/// `round(i (n-1) / (k-1))`; for `k = 1` the middle position `n / 2`.
pub fn endpoint_spacing(n: usize, k: usize) -> Vec<usize> {
    match k {
        0 => Vec::new(),
        1 => vec![n / 2],
        _ => (0..k)
            .map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize)
            .collect(),
    }
}

/// `k` positions at a fixed stride from the start: `floor(i n / k)`.
pub fn stride_spacing(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * n / k).collect()
}

fn random_subset<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Support from the patient's unlabeled slices, query = all labeled slices.
pub fn build_target_task<R: Rng>(
    patient: &PatientVolume,
    k: usize,
    selection: SupportSelection,
    rng: &mut R,
) -> Result<TargetTask> {
    let unlabeled = patient.unlabeled_positions();
    if unlabeled.len() < k {
        return Err(Error::InsufficientUnlabeled {
            patient_id: patient.id.clone(),
            available: unlabeled.len(),
            needed: k,
        });
    }
    let query = patient.labeled_positions();
    if query.is_empty() {
        return Err(Error::NoLabeledQuery(patient.id.clone()));
    }
    let picks = match selection {
        SupportSelection::Uniform => stride_spacing(unlabeled.len(), k),
        SupportSelection::Random => random_subset(rng, unlabeled.len(), k),
    };
    Ok(TargetTask {
        patient_id: patient.id.clone(),
        support: picks.into_iter().map(|i| unlabeled[i]).collect(),
        query,
    })
}

pub fn build_inference_task(patient: &PatientVolume, k: usize) -> Result<InferenceTask> {
    build_inference_task_with(patient, k, SupportSelection::Uniform, &mut ChaCha8Rng::seed_from_u64(0))
}

pub fn build_inference_task_with<R: Rng>(
    patient: &PatientVolume,
    k: usize,
    selection: SupportSelection,
    rng: &mut R,
) -> Result<InferenceTask> {
    let n = patient.len();
    if n < k.max(1) {
        return Err(Error::InsufficientSlices {
            patient_id: patient.id.clone(),
            available: n,
            needed: k.max(1),
        });
    }
    let support = match selection {
        SupportSelection::Uniform => endpoint_spacing(n, k),
        SupportSelection::Random => random_subset(rng, n, k),
    };
    Ok(InferenceTask {
        patient_id: patient.id.clone(),
        support,
        query: (0..n).collect(),
    })
}

/// Evaluation tasks assigned round-robin over `patients`. Each patient's
/// first task uses uniform support spacing; repeat visits draw a random
/// support set from a seed derived from `seed` and the task number.
pub fn build_test_tasks(patients: &[&PatientVolume], n_tasks: usize, k: usize, seed: u64) -> Result<Vec<(InferenceTask, u64)>> {
    if patients.is_empty() {
        return Err(Error::EmptyBatch);
    }
    (0..n_tasks)
        .map(|j| {
            let p = patients[j % patients.len()];
            let task_seed = seed.wrapping_add(j as u64);
            let selection = if j < patients.len() {
                SupportSelection::Uniform
            } else {
                SupportSelection::Random
            };
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
            Ok((build_inference_task_with(p, k, selection, &mut rng)?, task_seed))
        })
        .collect()
}

/// Per-patient split assignment and per-slice labeled flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub splits: BTreeMap<String, Split>,
    pub labeled: BTreeMap<String, Vec<bool>>,
}

impl SplitSpec {
    pub fn from_volumes(volumes: &[PatientVolume]) -> Self {
        let mut splits = BTreeMap::new();
        let mut labeled = BTreeMap::new();
        for v in volumes {
            splits.insert(v.id.clone(), v.split);
            labeled.insert(v.id.clone(), (0..v.len()).map(|p| v.masks.contains_key(&p)).collect());
        }
        Self { splits, labeled }
    }

    pub fn patients(&self, split: Split) -> Vec<&str> {
        self.splits
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Fraction of unlabeled slices over the patients of `split`.
    pub fn unlabeled_fraction(&self, split: Split) -> Option<f64> {
        let (mut total, mut unlabeled) = (0usize, 0usize);
        for id in self.patients(split) {
            let flags = &self.labeled[id];
            total += flags.len();
            unlabeled += flags.iter().filter(|l| !**l).count();
        }
        (total > 0).then(|| unlabeled as f64 / total as f64)
    }
}

/// One line of an audit/replay task stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskRecord {
    Source {
        class_id: usize,
        support: Vec<usize>,
        query: Vec<usize>,
        seed: u64,
    },
    Target {
        patient_id: String,
        support: Vec<usize>,
        query: Vec<usize>,
        seed: u64,
    },
    Inference {
        patient_id: String,
        support: Vec<usize>,
        query: Vec<usize>,
        seed: u64,
    },
}

impl TaskRecord {
    pub fn source(e: &SourceEpisode, seed: u64) -> Self {
        TaskRecord::Source {
            class_id: e.class_id,
            support: e.support.clone(),
            query: e.query.clone(),
            seed,
        }
    }

    pub fn target(t: &TargetTask, seed: u64) -> Self {
        TaskRecord::Target {
            patient_id: t.patient_id.clone(),
            support: t.support.clone(),
            query: t.query.clone(),
            seed,
        }
    }

    pub fn inference(t: &InferenceTask, seed: u64) -> Self {
        TaskRecord::Inference {
            patient_id: t.patient_id.clone(),
            support: t.support.clone(),
            query: t.query.clone(),
            seed,
        }
    }
}

pub fn write_task_stream<W: Write>(mut out: W, records: &[TaskRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<task stream>", e))?;
    }
    Ok(())
}

pub fn read_task_stream<R: BufRead>(input: R) -> Result<Vec<TaskRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io("<task stream>", e))?;
            serde_json::from_str(&l).map_err(|e| Error::Serde(e.to_string()))
        })
        .collect()
}

/// The source episodes a seeded sampler produces, in order.
pub fn source_episode_stream(ds: &SourceDataset, k: usize, q_n: usize, count: usize, seed: u64) -> Result<Vec<SourceEpisode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_source_episode(ds, k, q_n, &mut rng)).collect()
}
