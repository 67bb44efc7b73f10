//! Run configuration as TOML.
//!
//! Every table and key is optional and falls back to its default; unknown
//! keys are rejected.
//!
//! ```toml
//! [data]            # dataset generation (seed, scene counts, [data.scene])
//! [model]           # network sizes, visibility mode, tau, [model.cascade]
//! [train]           # optimizer, epochs, selection mode, loss weights
//! [fusion]          # filtering and fusion thresholds
//! [eval]            # point-cloud threshold and view-count sweep
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::synthetic::DatasetSpec;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Distance threshold of the percentage metrics, in world units.
    pub threshold: f64,
    /// Input view counts of the inference sweep.
    pub view_counts: Vec<usize>,
    /// References per scene in sweeps; 0 uses all.
    pub refs_per_scene: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.01, view_counts: vec![3, 5, 7, 11, 15], refs_per_scene: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.eval.threshold > 0.0) || self.eval.view_counts.iter().any(|&n| n < 2) {
            return Err(Error::Config("eval threshold must be positive and view counts >= 2".into()));
        }
        if self.fusion.reproj_tol <= 0.0 || self.fusion.depth_tol <= 0.0 || self.fusion.patch_spread <= 0.0 || self.fusion.merge_radius < 0.0 {
            return Err(Error::Config("fusion tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_tables_and_unknown_keys() {
        let c = Config::parse("[model]\ndepth_hypotheses = 16\n[train]\nmode = \"best-two\"\n").unwrap();
        assert_eq!(c.model.depth_hypotheses, 16);
        assert_eq!(c.model.groups, 8);
        assert!(Config::parse("[train]\nlearning_rat = 0.1\n").is_err());
        assert!(Config::parse("[model]\ntau = 2.0\n").is_err());
    }
}
