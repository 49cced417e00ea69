//! Experiment configuration: a TOML file with `[model]`, `[schedule]`,
//! `[data]` and `[loss]` sections, plus dotted `key=value` overrides.
//!
//! Every training constant has a default here (batch size 16, the crop
//! sizes, per-dataset rounds and learning-rate decay, 30 unsupervised
//! epochs). Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{SupervisedLossConfig, UnsupLossConfig, NUM_SCALES};
use crate::network::{NetworkConfig, SizePreset, Variant};
use crate::schedule::{parse_schedule, LrPolicy, StageMode, StageRef};

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 20_200_406;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub size_preset: SizePreset,
    /// Overrides the preset widths (7 entries, scales 0..=6).
    pub channel_schedule: Option<Vec<usize>>,
    pub blocks_per_scale: Option<usize>,
    pub d_max_base: usize,
    pub fmm_offsets: Vec<i32>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let n = NetworkConfig::default();
        ModelSection {
            variant: n.variant,
            size_preset: n.size_preset,
            channel_schedule: None,
            blocks_per_scale: None,
            d_max_base: n.d_max_base,
            fmm_offsets: n.fmm_offsets,
        }
    }
}

impl ModelSection {
    pub fn network_config(&self) -> Result<NetworkConfig> {
        let mut n = NetworkConfig::new(self.variant, self.size_preset);
        if let Some(c) = &self.channel_schedule {
            n.channel_schedule = c.clone();
        }
        if let Some(b) = self.blocks_per_scale {
            n.blocks_per_scale = b;
        }
        n.d_max_base = self.d_max_base;
        n.fmm_offsets = self.fmm_offsets.clone();
        n.validate()?;
        Ok(n)
    }
}

/// Training rounds of a supervised stage on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePolicy {
    /// Epochs per round.
    pub rounds: Vec<usize>,
    /// Learning rate within a round; restarts every round.
    pub lr: LrPolicy,
    /// Random crop `[height, width]`, clamped to the image.
    pub crop: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnsupervisedPolicy {
    pub epochs: usize,
    pub lr: LrPolicy,
}

impl Default for UnsupervisedPolicy {
    fn default() -> Self {
        UnsupervisedPolicy {
            epochs: 30,
            lr: LrPolicy::constant(1e-4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub order: String,
    pub seed: u64,
    pub batch_size: usize,
    /// Fraction of each dataset held out for validation.
    pub val_ratio: f64,
    /// Policy per dataset name used in `order`.
    pub stages: BTreeMap<String, StagePolicy>,
    pub unsupervised: UnsupervisedPolicy,
    /// Crop for datasets without a stage policy (unsupervised-only names).
    pub default_crop: [usize; 2],
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let mut stages = BTreeMap::new();
        stages.insert(
            "SF".to_string(),
            StagePolicy {
                rounds: vec![20, 20, 20, 30],
                lr: LrPolicy {
                    base: 1e-4,
                    factor: 0.5,
                    every: 10,
                    at: Vec::new(),
                },
                crop: [384, 768],
            },
        );
        stages.insert(
            "DS".to_string(),
            StagePolicy {
                rounds: vec![7, 7, 7, 10],
                lr: LrPolicy::constant(1e-4),
                crop: [256, 768],
            },
        );
        stages.insert(
            "K".to_string(),
            StagePolicy {
                rounds: vec![1200, 1200, 1200],
                lr: LrPolicy {
                    base: 1e-5,
                    factor: 0.1,
                    every: 0,
                    at: vec![600],
                },
                crop: [256, 512],
            },
        );
        ScheduleSection {
            order: "SF*+SF+DS+K".into(),
            seed: DEFAULT_SEED,
            batch_size: 16,
            val_ratio: 0.1,
            stages,
            unsupervised: UnsupervisedPolicy::default(),
            default_crop: [256, 512],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Per-scale weights `omega^0..omega^6`, one vector per round.
    pub omega_rounds: Vec<[f64; NUM_SCALES]>,
    pub unsupervised: UnsupLossConfig,
    /// Experimental: weight of the photometric loss added to supervised
    /// stages. Unset by default.
    pub mixed_unsupervised_weight: Option<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            omega_rounds: SupervisedLossConfig::default().rounds,
            unsupervised: UnsupLossConfig::default(),
            mixed_unsupervised_weight: None,
        }
    }
}

impl LossSection {
    pub fn supervised(&self) -> SupervisedLossConfig {
        SupervisedLossConfig {
            rounds: self.omega_rounds.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    /// Dataset name -> directory or synthetic identifier.
    pub data: BTreeMap<String, String>,
    pub loss: LossSection,
}

/// A resolved stage: what to train on and how.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: StageRef,
    pub dataset_id: String,
    /// Epochs per round.
    pub rounds: Vec<usize>,
    pub lr: LrPolicy,
    pub crop: [usize; 2],
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies overrides in order, validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table = text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.network_config()?;
        self.loss.supervised().validate()?;
        self.loss.unsupervised.validate()?;
        if let Some(w) = self.loss.mixed_unsupervised_weight {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss.mixed_unsupervised_weight {w} must be finite and >= 0")));
            }
        }
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::Config("schedule.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&s.val_ratio) {
            return Err(Error::Config(format!("schedule.val_ratio {} not in [0, 1)", s.val_ratio)));
        }
        parse_schedule(&s.order)?;
        for (name, p) in &s.stages {
            p.lr.validate(&format!("schedule.stages.{name}"))?;
            if p.crop.contains(&0) {
                return Err(Error::Config(format!("schedule.stages.{name}.crop must be positive")));
            }
        }
        s.unsupervised.lr.validate("schedule.unsupervised")?;
        Ok(())
    }

    /// Resolves the schedule order against stage policies and dataset
    /// entries; fails before any training if something is missing.
    pub fn stage_plans(&self) -> Result<Vec<StagePlan>> {
        let s = &self.schedule;
        parse_schedule(&s.order)?
            .into_iter()
            .map(|stage| {
                let dataset_id = self.data.get(&stage.dataset).cloned().ok_or_else(|| {
                    Error::Data(format!("dataset {:?} is not configured under [data]", stage.dataset))
                })?;
                let policy = s.stages.get(&stage.dataset);
                let crop = policy.map_or(s.default_crop, |p| p.crop);
                let (rounds, lr) = match stage.mode {
                    StageMode::UnsupervisedPretrain => (vec![s.unsupervised.epochs], s.unsupervised.lr.clone()),
                    StageMode::Supervised => {
                        let p = policy.ok_or_else(|| {
                            Error::Config(format!(
                                "no schedule.stages.{} policy for supervised stage",
                                stage.dataset
                            ))
                        })?;
                        (p.rounds.clone(), p.lr.clone())
                    }
                };
                Ok(StagePlan {
                    stage,
                    dataset_id,
                    rounds,
                    lr,
                    crop,
                })
            })
            .collect()
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal, falling
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.schedule.batch_size, 16);
        assert_eq!(cfg.schedule.stages["SF"].crop, [384, 768]);
        assert_eq!(cfg.schedule.unsupervised.epochs, 30);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let o = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let cfg = ExperimentConfig::load(
            None,
            &o(&["schedule.batch_size=2", "model.variant=esnet-m", "data.SF=synthetic:uniform-shift:4:1:64x128"]),
        )
        .unwrap();
        assert_eq!(cfg.schedule.batch_size, 2);
        assert_eq!(cfg.model.variant, Variant::EsNetM);
        assert_eq!(cfg.data["SF"], "synthetic:uniform-shift:4:1:64x128");
        assert!(ExperimentConfig::load(None, &o(&["schedule.bach_size=2"])).is_err());
        assert!(ExperimentConfig::load(None, &o(&["nonsense=1"])).is_err());
        assert!(ExperimentConfig::load(None, &o(&["schedule.batch_size"])).is_err());
        assert!(ExperimentConfig::load(None, &o(&["schedule.batch_size=0"])).is_err());
        assert!(ExperimentConfig::load(None, &o(&["model.variant=resnet"])).is_err());
    }

    #[test]
    fn stage_plans_require_datasets() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.stage_plans(), Err(Error::Data(_))));
        for k in ["SF", "DS", "K"] {
            cfg.data.insert(k.into(), "synthetic:uniform-shift:2:1:64x64".to_string());
        }
        let plans = cfg.stage_plans().unwrap();
        assert_eq!(plans.len(), 4);
        assert_eq!(plans[0].rounds, vec![30]);
        assert_eq!(plans[1].rounds, vec![20, 20, 20, 30]);
        assert_eq!(plans[3].lr.at, vec![600]);
    }
}
