//! TOML run configuration with `[scenario]`, `[pipeline]` and `[compare]`
//! sections. Every section and key is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Mode, PipelineConfig};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { modes: vec![Mode::L2, Mode::Bce, Mode::BceAd], seeds: (0..10).collect() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub pipeline: PipelineConfig,
    pub compare: CompareConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the scenario, the pipeline for its own mode, and the pipeline
    /// for every mode listed under `[compare]`.
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pipeline.validate()?;
        for &mode in &self.compare.modes {
            self.pipeline_for(mode, self.scenario.seed).validate()?;
        }
        Ok(())
    }

    /// Pipeline settings for one compare run: the given mode, with the
    /// clustering seed tied to the scenario seed.
    pub fn pipeline_for(&self, mode: Mode, seed: u64) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        p.mode = mode;
        p.vb.seed = seed;
        p
    }

    pub fn scenario_for(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig { seed, ..self.scenario.clone() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}
