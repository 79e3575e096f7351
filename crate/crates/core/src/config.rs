//! Experiment configuration: one JSON document drives a whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contract::{Contract, Stage, StageSchedule};
use crate::error::{Error, Result};
use crate::evolve::EvolutionConfig;
use crate::genome::canonical_json;
use crate::metrics::{FitnessWeights, ScoreWeights};
use crate::rng::derive_seed;
use crate::taskbench::TaskSpec;

const CONTRACT_SEED_STREAM: u64 = 0xc0_0000;
const SPLIT_SEED_STREAM: u64 = 0x5_0717;

/// Contract settings as written in a config. Seeds are derived from the
/// experiment master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractSettings {
    pub seeds: usize,
    pub folds: usize,
    pub schedule: StageSchedule,
    pub leakage_gate: bool,
    pub banned_columns: Vec<usize>,
    pub allow_random_split: bool,
}

impl Default for ContractSettings {
    fn default() -> Self {
        let c = Contract::default();
        Self {
            seeds: c.seeds.len(),
            folds: c.folds,
            schedule: c.schedule,
            leakage_gate: c.leakage_gate,
            banned_columns: c.banned_columns,
            allow_random_split: c.allow_random_split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningSettings {
    pub cost_cfd: f64,
    pub cost_surrogate: f64,
    pub envelope_margin: f64,
}

impl Default for ScreeningSettings {
    fn default() -> Self {
        Self {
            cost_cfd: 10.0,
            cost_surrogate: 500.0,
            envelope_margin: crate::escalate::DEFAULT_ENVELOPE_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { seeds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required; the only source of randomness besides the task seed.
    pub master_seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub contract: ContractSettings,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub score_weights: ScoreWeights,
    #[serde(default)]
    pub fitness_weights: FitnessWeights,
    #[serde(default)]
    pub screening: ScreeningSettings,
    #[serde(default)]
    pub ablation: AblationSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// A config with every default and the given master seed.
    pub fn with_seed(master_seed: u64) -> Self {
        Self {
            master_seed: Some(master_seed),
            output_dir: default_output_dir(),
            task: TaskSpec::default(),
            contract: ContractSettings::default(),
            evolution: EvolutionConfig::default(),
            score_weights: ScoreWeights::default(),
            fitness_weights: FitnessWeights::default(),
            screening: ScreeningSettings::default(),
            ablation: AblationSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Spec(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.master_seed
            .ok_or_else(|| Error::Spec("master_seed is required".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.master_seed()?;
        self.task.validate()?;
        self.contract()?.validate()?;
        self.evolution()?.validate()?;
        let s = &self.screening;
        if [s.cost_cfd, s.cost_surrogate, s.envelope_margin]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Spec("screening costs and margin must be finite and >= 0".into()));
        }
        if self.ablation.seeds == 0 {
            return Err(Error::Spec("ablation needs at least one seed".into()));
        }
        Ok(())
    }

    /// The explore-stage contract; evaluation seeds and the split seed are
    /// derived from the master seed.
    pub fn contract(&self) -> Result<Contract> {
        let m = self.master_seed()?;
        let s = &self.contract;
        Ok(Contract {
            seeds: (0..s.seeds as u64).map(|i| derive_seed(m, CONTRACT_SEED_STREAM + i)).collect(),
            folds: s.folds,
            split_seed: derive_seed(m, SPLIT_SEED_STREAM),
            stage: Stage::Explore,
            schedule: s.schedule,
            leakage_gate: s.leakage_gate,
            banned_columns: s.banned_columns.clone(),
            allow_random_split: s.allow_random_split,
            score_weights: self.score_weights,
            fitness_weights: self.fitness_weights,
        })
    }

    pub fn evolution(&self) -> Result<EvolutionConfig> {
        Ok(EvolutionConfig {
            master_seed: self.master_seed()?,
            ..self.evolution.clone()
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(canonical_json(self)?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn master_seed_is_mandatory() {
        let err = ExperimentConfig::from_json("{}").unwrap_err();
        assert!(err.to_string().contains("master_seed"), "{err}");
        let c = ExperimentConfig::from_json(r#"{"master_seed": 7}"#).unwrap();
        assert_eq!(c, ExperimentConfig::with_seed(7));
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"master_seed": 1, "bogus": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"master_seed": 1, "contract": {"seeds": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"master_seed": 1, "evolution": {"master_seed": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"master_seed": 1, "task": {"features": 1}}"#).is_err());
    }

    #[test]
    fn seeds_follow_master_seed() {
        let a = ExperimentConfig::with_seed(1);
        let b = ExperimentConfig::with_seed(2);
        assert_eq!(a.contract().unwrap(), ExperimentConfig::with_seed(1).contract().unwrap());
        assert_ne!(a.contract().unwrap().seeds, b.contract().unwrap().seeds);
        assert_ne!(a.contract().unwrap().split_seed, b.contract().unwrap().split_seed);
        assert_eq!(b.evolution().unwrap().master_seed, 2);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
