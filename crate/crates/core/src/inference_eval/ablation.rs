use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate_tasks, Aggregate, EvalConfig};
use crate::data_io::{synth_patients, synth_source, PatientSynthSpec, PatientVolume, Split};
use crate::episodes::build_test_tasks;
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::network::{NetworkConfig, RelationMode, SegmentationNet};
use crate::training::{baaf_finetune, meta_train, Phase, TrainConfig, Validation};

/// One row of the comparison: a fine-tuning objective and relation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub label: String,
    pub objective: Objective,
    pub relation: RelationMode,
}

/// Baseline (cross-entropy), Dice only, Hausdorff only, the full method,
/// and the full method without the relation module.
pub fn standard_variants() -> Vec<Variant> {
    let v = |name: &str, label: &str, objective, relation| Variant {
        name: name.into(),
        label: label.into(),
        objective,
        relation,
    };
    vec![
        v("baseline_bce", "Baseline", Objective::Bce, RelationMode::Prototype),
        v("dice_only", "Model A", Objective::Dice, RelationMode::Prototype),
        v("hd_only", "Model B", Objective::Hausdorff, RelationMode::Prototype),
        v("falcon_full", "FALCON", Objective::HausdorffAdversarial, RelationMode::Prototype),
        v("falcon_no_rm", "FALCON w/o RM", Objective::HausdorffAdversarial, RelationMode::Ablated),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub network: NetworkConfig,
    pub meta: TrainConfig,
    pub finetune: TrainConfig,
    pub source_classes: usize,
    pub source_samples_per_class: usize,
    pub patients: PatientSynthSpec,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let network = NetworkConfig {
            depth: 3,
            channels_per_level: vec![8, 16, 32],
            bottleneck_channels: 32,
            input_size: [32, 32],
            support_size: 3,
            ..NetworkConfig::default()
        };
        Self {
            network,
            meta: TrainConfig {
                episodes_or_epochs: 300,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::baaf(),
            source_classes: 10,
            source_samples_per_class: 20,
            patients: PatientSynthSpec {
                size: 32,
                slices_per_patient: 20,
                ..PatientSynthSpec::default()
            },
            eval: EvalConfig {
                n_tasks: 3,
                ..EvalConfig::default()
            },
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.meta.validate()?;
        self.eval.validate()?;
        let [h, w] = self.network.input_size;
        if h != self.patients.size || w != self.patients.size {
            return Err(Error::ConfigMismatch(format!(
                "network input {h}x{w} but synthetic images are {0}x{0}",
                self.patients.size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("the suite needs at least one seed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dsc: f64,
    pub hd95: f64,
    pub best_epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub label: String,
    pub per_seed: Vec<SeedResult>,
    /// Across seeds, of each seed's task-averaged value.
    pub dsc: Aggregate,
    pub hd95: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("config,label,dsc_mean,dsc_std,hd95_mean,hd95_std,seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name,
                r.label,
                r.dsc.mean,
                r.dsc.std,
                r.hd95.mean,
                r.hd95.std,
                r.per_seed.len()
            );
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| Model | Config | DSC (%) | HD95 (px) |\n|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
                r.label,
                r.name,
                100.0 * r.dsc.mean,
                100.0 * r.dsc.std,
                r.hd95.mean,
                r.hd95.std
            );
        }
        s
    }
}

fn split<'a>(vols: &'a [PatientVolume], s: Split) -> Vec<PatientVolume> {
    vols.iter().filter(|v| v.split == s).cloned().collect::<Vec<_>>()
}

/// Meta-trains, fine-tunes and evaluates every variant on identical data
/// and seeds. Variants sharing a relation mode share the meta-trained
/// weights of a seed. `progress` receives one line per finished run.
pub fn run_ablation_suite(
    cfg: &SuiteConfig,
    variants: &[Variant],
    mut progress: Option<&mut dyn FnMut(&str)>,
) -> Result<AblationTable> {
    cfg.validate()?;
    let mut results: BTreeMap<usize, Vec<SeedResult>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let size = cfg.patients.size;
        let source = synth_source(cfg.source_classes, cfg.source_samples_per_class, size, seed)?;
        let cohort = synth_patients(&PatientSynthSpec {
            seed,
            ..cfg.patients.clone()
        })?;
        let train = split(&cohort.volumes, Split::Train);
        let val = split(&cohort.volumes, Split::Val);
        let test = split(&cohort.volumes, Split::Test);
        let test_refs: Vec<&PatientVolume> = test.iter().collect();
        let tasks = build_test_tasks(&test_refs, cfg.eval.n_tasks, cfg.network.support_size, cfg.eval.task_seed.wrapping_add(seed))?;
        let validation = Validation {
            patients: &val,
            sealed: &cohort.sealed,
            eval: cfg.eval.clone(),
        };
        let mut meta_cache: BTreeMap<String, SegmentationNet> = BTreeMap::new();
        for (vi, v) in variants.iter().enumerate() {
            let key = format!("{:?}", v.relation);
            let init = match meta_cache.get(&key) {
                Some(n) => n.clone(),
                None => {
                    let net_cfg = NetworkConfig {
                        relation: v.relation,
                        ..cfg.network.clone()
                    };
                    let meta_cfg = TrainConfig {
                        phase: Phase::MetaTrain,
                        seed,
                        ..cfg.meta.clone()
                    };
                    let net = meta_train(&source, &net_cfg, &meta_cfg)?.net;
                    meta_cache.insert(key, net.clone());
                    net
                }
            };
            let ft_cfg = TrainConfig {
                phase: Phase::Baaf,
                objective: v.objective,
                seed,
                ..cfg.finetune.clone()
            };
            let state = baaf_finetune(&train, init, &ft_cfg, (!val.is_empty()).then_some(&validation))?;
            let model = state.best_model();
            let report = evaluate_tasks(&model, &test, &tasks, &cohort.sealed, &cfg.eval)?;
            if let Some(p) = progress.as_mut() {
                p(&format!(
                    "seed {seed} {}: dsc {:.4} hd95 {:.3} (best epoch {:?})",
                    v.name, report.dsc.mean, report.hd95.mean, state.best.map(|b| b.0)
                ));
            }
            results.entry(vi).or_default().push(SeedResult {
                seed,
                dsc: report.dsc.mean,
                hd95: report.hd95.mean,
                best_epoch: state.best.map(|b| b.0),
            });
        }
    }
    let rows = variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let per_seed = results.remove(&i).unwrap_or_default();
            AblationRow {
                name: v.name.clone(),
                label: v.label.clone(),
                dsc: Aggregate::of(&per_seed.iter().map(|r| r.dsc).collect::<Vec<_>>()),
                hd95: Aggregate::of(&per_seed.iter().map(|r| r.hd95).collect::<Vec<_>>()),
                per_seed,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}
