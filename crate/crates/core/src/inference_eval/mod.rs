//! Gradient-free task-aware inference and the evaluation protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{PatientVolume, SealedMasks};
use crate::episodes::InferenceTask;
use crate::error::{Error, Result};
use crate::geometry::{compare_masks, BinaryMask, HdSymmetry, ProbMap};
use crate::network::{RelationMode, SegmentationNet};
use crate::nn::Tensor;

/// Query slices are pushed through the network this many at a time.
/// Results do not depend on the chunk size.
const QUERY_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over slices within a task, then mean and spread over tasks.
    #[default]
    SliceThenTask,
    /// Every slice of every task weighted equally.
    PooledSlices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub symmetry: HdSymmetry,
    pub aggregation: Aggregation,
    /// Number of evaluation tasks, assigned round-robin over test patients.
    pub n_tasks: usize,
    pub task_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            symmetry: HdSymmetry::Max,
            aggregation: Aggregation::SliceThenTask,
            n_tasks: 10,
            task_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        if self.n_tasks == 0 {
            return Err(Error::InvalidConfig("n_tasks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub patient_id: String,
    pub support: Vec<usize>,
    /// One entry per query slice, in query order.
    pub query: Vec<usize>,
    pub probs: Vec<ProbMap>,
    pub masks: Vec<BinaryMask>,
    pub threshold: f64,
}

/// Anything that can segment an inference task.
pub trait Predictor {
    fn segment(&self, patient: &PatientVolume, task: &InferenceTask, threshold: f64) -> Result<SegmentationResult>;
}

fn to_prob_maps(t: &Tensor) -> Result<Vec<ProbMap>> {
    (0..t.n())
        .map(|i| ProbMap::new(t.h(), t.w(), t.sample(i).iter().map(|&v| v as f64).collect()))
        .collect()
}

fn check_task(patient: &PatientVolume, task: &InferenceTask) -> Result<()> {
    if task.patient_id != patient.id {
        return Err(Error::InvalidValue(format!(
            "task for patient {} applied to patient {}",
            task.patient_id, patient.id
        )));
    }
    if let Some(&bad) = task.support.iter().chain(&task.query).find(|&&p| p >= patient.len()) {
        return Err(Error::InsufficientSlices {
            patient_id: patient.id.clone(),
            available: patient.len(),
            needed: bad + 1,
        });
    }
    Ok(())
}

/// The conditioning prototype for a task: computed once from the support
/// slices, or all zeros when there is no support or the relation module
/// is ablated.
pub fn task_prototype(net: &SegmentationNet, patient: &PatientVolume, support: &[usize]) -> Result<Tensor> {
    let cfg = net.config();
    if support.is_empty() || cfg.relation == RelationMode::Ablated {
        let [h, w] = cfg.bottleneck_size();
        return Ok(Tensor::zeros([1, cfg.bottleneck_channels, h, w]));
    }
    net.prototype(&patient.batch(support)?)
}

/// Segments every query slice of `task` with frozen weights; the
/// prototype is computed once and reused for all queries.
pub fn infer_patient(
    net: &SegmentationNet,
    patient: &PatientVolume,
    task: &InferenceTask,
    threshold: f64,
) -> Result<SegmentationResult> {
    check_task(patient, task)?;
    let proto = task_prototype(net, patient, &task.support)?;
    let mut probs = Vec::with_capacity(task.query.len());
    for chunk in task.query.chunks(QUERY_CHUNK) {
        let y = net.predict_with_prototype(&patient.batch(chunk)?, &proto)?;
        probs.extend(to_prob_maps(&y)?);
    }
    let masks = probs.iter().map(|p| p.binarize(threshold)).collect();
    Ok(SegmentationResult {
        patient_id: patient.id.clone(),
        support: task.support.clone(),
        query: task.query.clone(),
        probs,
        masks,
        threshold,
    })
}

impl Predictor for SegmentationNet {
    fn segment(&self, patient: &PatientVolume, task: &InferenceTask, threshold: f64) -> Result<SegmentationResult> {
        infer_patient(self, patient, task, threshold)
    }
}

/// Returns the sealed ground truth as its prediction.
pub struct OracleModel<'a>(pub &'a SealedMasks);

/// Predicts background everywhere.
pub struct BackgroundModel;

fn constant_result(patient: &PatientVolume, task: &InferenceTask, threshold: f64, masks: Vec<BinaryMask>) -> SegmentationResult {
    SegmentationResult {
        patient_id: patient.id.clone(),
        support: task.support.clone(),
        query: task.query.clone(),
        probs: masks.iter().map(ProbMap::from).collect(),
        masks,
        threshold,
    }
}

impl Predictor for OracleModel<'_> {
    fn segment(&self, patient: &PatientVolume, task: &InferenceTask, threshold: f64) -> Result<SegmentationResult> {
        check_task(patient, task)?;
        let masks = task
            .query
            .iter()
            .map(|&p| sealed_mask(self.0, patient, p).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(constant_result(patient, task, threshold, masks))
    }
}

impl Predictor for BackgroundModel {
    fn segment(&self, patient: &PatientVolume, task: &InferenceTask, threshold: f64) -> Result<SegmentationResult> {
        check_task(patient, task)?;
        let [h, w] = patient.image_size().unwrap_or([1, 1]);
        let masks = task.query.iter().map(|_| BinaryMask::zeros(h, w)).collect();
        Ok(constant_result(patient, task, threshold, masks))
    }
}

fn sealed_mask<'a>(sealed: &'a SealedMasks, patient: &PatientVolume, pos: usize) -> Result<&'a BinaryMask> {
    let index = patient.indices[pos];
    sealed
        .get(&patient.id)
        .and_then(|m| m.get(&index))
        .ok_or_else(|| Error::MissingGroundTruth {
            patient_id: patient.id.clone(),
            index,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for one value.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub position: usize,
    pub dsc: f64,
    pub hd95: f64,
    pub hd95_pred_to_gt: f64,
    pub hd95_gt_to_pred: f64,
    pub empty_prediction: bool,
    pub both_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub patient_id: String,
    pub seed: u64,
    pub support: Vec<usize>,
    pub n_slices: usize,
    pub dsc: f64,
    pub hd95: f64,
    pub hd95_pred_to_gt: f64,
    pub hd95_gt_to_pred: f64,
    pub empty_predictions: usize,
    pub both_empty: usize,
    #[serde(skip)]
    pub slices: Vec<SliceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub param_count: usize,
    pub flop_count: u64,
    pub config_digest: String,
    pub seed: u64,
    pub best_epoch: Option<u64>,
    pub task_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
    pub dsc: Aggregate,
    pub hd95: Aggregate,
    pub threshold: f64,
    pub symmetry: HdSymmetry,
    pub aggregation: Aggregation,
    pub meta: ReportMeta,
}

pub const TASK_RULE: &str = "round-robin over test patients; first visit uniform support spacing, repeats random support seeded by task_seed + task";

impl MetricsReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "task,patient_id,seed,n_slices,dsc,hd95,hd95_pred_to_gt,hd95_gt_to_pred,empty_predictions,both_empty\n",
        );
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                t.task,
                t.patient_id,
                t.seed,
                t.n_slices,
                t.dsc,
                t.hd95,
                t.hd95_pred_to_gt,
                t.hd95_gt_to_pred,
                t.empty_predictions,
                t.both_empty
            );
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Recomputes the aggregates from the per-task rows.
    pub fn recomputed(&self) -> (Aggregate, Aggregate) {
        match self.aggregation {
            Aggregation::SliceThenTask => (
                Aggregate::of(&self.tasks.iter().map(|t| t.dsc).collect::<Vec<_>>()),
                Aggregate::of(&self.tasks.iter().map(|t| t.hd95).collect::<Vec<_>>()),
            ),
            Aggregation::PooledSlices => {
                let slices: Vec<&SliceMetrics> = self.tasks.iter().flat_map(|t| &t.slices).collect();
                (
                    Aggregate::of(&slices.iter().map(|s| s.dsc).collect::<Vec<_>>()),
                    Aggregate::of(&slices.iter().map(|s| s.hd95).collect::<Vec<_>>()),
                )
            }
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Scores one segmentation result against sealed ground truth.
pub fn score_result(
    result: &SegmentationResult,
    patient: &PatientVolume,
    sealed: &SealedMasks,
    symmetry: HdSymmetry,
) -> Result<Vec<SliceMetrics>> {
    result
        .query
        .iter()
        .zip(&result.masks)
        .map(|(&pos, pred)| {
            let gt = sealed_mask(sealed, patient, pos)?;
            let c = compare_masks(pred, gt, symmetry)?;
            Ok(SliceMetrics {
                position: pos,
                dsc: c.dsc,
                hd95: c.hd95,
                hd95_pred_to_gt: c.hd95_pred_to_gt,
                hd95_gt_to_pred: c.hd95_gt_to_pred,
                empty_prediction: c.empty_prediction,
                both_empty: c.both_empty,
            })
        })
        .collect()
}

/// Runs `model` on each task and aggregates DSC and HD95: per task over
/// slices, then across tasks.
pub fn evaluate_tasks<P: Predictor + ?Sized>(
    model: &P,
    patients: &[PatientVolume],
    tasks: &[(InferenceTask, u64)],
    sealed: &SealedMasks,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let by_id: BTreeMap<&str, &PatientVolume> = patients.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut rows = Vec::with_capacity(tasks.len());
    for (j, (task, seed)) in tasks.iter().enumerate() {
        let patient = by_id
            .get(task.patient_id.as_str())
            .ok_or_else(|| Error::InvalidValue(format!("unknown patient {}", task.patient_id)))?;
        // Fail before running the model if any ground truth is missing.
        for &p in &task.query {
            sealed_mask(sealed, patient, p)?;
        }
        let result = model.segment(patient, task, cfg.threshold)?;
        let slices = score_result(&result, patient, sealed, cfg.symmetry)?;
        if slices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        rows.push(TaskMetrics {
            task: j,
            patient_id: task.patient_id.clone(),
            seed: *seed,
            support: task.support.clone(),
            n_slices: slices.len(),
            dsc: mean(slices.iter().map(|s| s.dsc)),
            hd95: mean(slices.iter().map(|s| s.hd95)),
            hd95_pred_to_gt: mean(slices.iter().map(|s| s.hd95_pred_to_gt)),
            hd95_gt_to_pred: mean(slices.iter().map(|s| s.hd95_gt_to_pred)),
            empty_predictions: slices.iter().filter(|s| s.empty_prediction).count(),
            both_empty: slices.iter().filter(|s| s.both_empty).count(),
            slices,
        });
    }
    let mut report = MetricsReport {
        tasks: rows,
        dsc: Aggregate { mean: 0.0, std: 0.0 },
        hd95: Aggregate { mean: 0.0, std: 0.0 },
        threshold: cfg.threshold,
        symmetry: cfg.symmetry,
        aggregation: cfg.aggregation,
        meta: ReportMeta {
            task_rule: TASK_RULE.into(),
            ..ReportMeta::default()
        },
    };
    (report.dsc, report.hd95) = report.recomputed();
    Ok(report)
}

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_digest(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

mod ablation;

pub use ablation::{run_ablation_suite, standard_variants, AblationRow, AblationTable, SeedResult, SuiteConfig, Variant};
