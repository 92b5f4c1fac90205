//! Unified run configuration read by every CLI subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalrank::EvalConfig;
use crate::losses::LossConfig;
use crate::pipeline::TrainConfig;
use crate::ram::RamConfig;
use crate::relnet::ModelConfig;
use crate::scene::GenConfig;

/// Which rows an ablation runs and whether the second training step is
/// included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub rows: Vec<String>,
    pub two_step: bool,
    /// Reliability thresholds visited by the sweep.
    pub sweep_tau_r: Vec<f64>,
    /// Grounding-score thresholds visited by the sweep.
    pub sweep_tau_gs: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            rows: ["a", "b", "c", "d", "e", "f"].map(String::from).to_vec(),
            two_step: true,
            sweep_tau_r: vec![0.1, 0.3, 0.5, 0.7],
            sweep_tau_gs: vec![0.1, 0.2, 0.3, 0.4],
        }
    }
}

/// Every sub-configuration plus the global seed. Parsing rejects unknown
/// keys at every level. The global seed overrides the seeds of the
/// generator, the model initializer and both training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub ram: RamConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// First training step.
    pub train: TrainConfig,
    /// Second training step.
    pub distill: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 7,
            gen: GenConfig::default(),
            ram: RamConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            distill: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        };
        // desk-scale schedule
        cfg.train.epochs = 25;
        cfg.distill.epochs = 25;
        cfg.apply_seed(7);
        cfg
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gen.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.distill.seed = seed;
    }

    /// Checks each section and the cross-section vocabulary sizes.
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.ram.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        self.eval.validate()?;
        let checks = [
            ("feature width", self.gen.feature_dim, self.model.d_v),
            ("object classes", self.gen.num_object_classes, self.model.num_classes),
            ("predicates", self.gen.num_predicates, self.model.num_predicates),
        ];
        for (what, data, model) in checks {
            if data != model {
                return Err(Error::InvalidConfig(format!("{what}: data has {data}, model expects {model}")));
            }
        }
        if self.ram.person_subjects != self.model.person_subjects {
            return Err(Error::InvalidConfig("ram and model disagree on person_subjects".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"gen": {"clips": 3, "bogus": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"d_zz": 3}}"#).is_err());
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig::from_json(r#"{"seed": 99, "gen": {"seed": 3}}"#).unwrap();
        assert_eq!((cfg.gen.seed, cfg.model.seed, cfg.train.seed, cfg.distill.seed), (99, 99, 99, 99));
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.num_predicates = 5;
        assert!(cfg.validate().is_err());
    }
}
