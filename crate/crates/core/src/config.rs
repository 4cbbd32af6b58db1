//! Layered run configuration: built-in defaults, then a TOML file, then
//! dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{IngestOptions, PatientSynthSpec};
use crate::error::{Error, Result};
use crate::inference_eval::{EvalConfig, SuiteConfig};
use crate::network::NetworkConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSpec {
    pub classes: usize,
    pub samples_per_class: usize,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            samples_per_class: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FalconConfig {
    /// Drives every stage: copied into the meta, fine-tune and synthetic
    /// target sections on resolve.
    pub seed: u64,
    pub network: NetworkConfig,
    pub meta: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub source: SourceSpec,
    pub target: PatientSynthSpec,
    pub ingest: IngestOptions,
    pub ablation: AblationSpec,
}

impl Default for FalconConfig {
    fn default() -> Self {
        let network = NetworkConfig::default();
        let [h, _] = network.input_size;
        Self {
            seed: 0,
            ingest: IngestOptions {
                resize: network.input_size,
                ..IngestOptions::default()
            },
            target: PatientSynthSpec {
                size: h,
                ..PatientSynthSpec::default()
            },
            network,
            meta: TrainConfig::default(),
            finetune: TrainConfig::baaf(),
            eval: EvalConfig::default(),
            source: SourceSpec::default(),
            ablation: AblationSpec::default(),
        }
    }
}

impl FalconConfig {
    /// Resolves defaults < `file` < `overrides`. Each override is
    /// `dotted.key=value` where the value is a TOML literal; bare words are
    /// taken as strings. Unknown keys are rejected.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(Self::default()).map_err(|e| Error::Serde(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Value = text
                .parse::<toml::Table>()
                .map(toml::Value::Table)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            merge(&mut root, layer);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.meta.seed = seed;
        self.finetune.seed = seed;
        self.target.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.meta.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        self.target.validate()?;
        self.finetune.loss.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Hex SHA-256 of the resolved snapshot.
    pub fn digest(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            network: self.network.clone(),
            meta: self.meta.clone(),
            finetune: self.finetune.clone(),
            source_classes: self.source.classes,
            source_samples_per_class: self.source.samples_per_class,
            patients: self.target.clone(),
            eval: self.eval.clone(),
            seeds: self.ablation.seeds.clone(),
        }
    }
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key `{key}`")));
    }
    let value = parse_literal(raw.trim());
    let mut cur = root;
    for (i, part) in path.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{}` is not a section", path[..i].join("."))))?;
        if i + 1 == path.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config section `{}`", path[..=i].join("."))))?;
    }
    unreachable!("path is non-empty")
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
