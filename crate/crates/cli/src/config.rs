//! Experiment configuration file: strict JSON, every section optional.

use std::path::{Path, PathBuf};

use dsca_core::engine::EngineConfig;
use dsca_core::error::DscaError;
use dsca_core::experiment::RunConfig;
use dsca_core::gradcheck::GradcheckConfig;
use dsca_core::world::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Feature width used with `--paper-profile`, wide enough for rank 128.
pub const PAPER_PROFILE_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub engine: EngineConfig,
    pub run: RunConfig,
    pub gradcheck: GradcheckConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            engine: EngineConfig::default(),
            run: RunConfig::default(),
            gradcheck: GradcheckConfig::default(),
            output_dir: PathBuf::from("dsca-out"),
        }
    }
}

/// 1-based line of the first occurrence of `"key"`, if any.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        cfg.validate().map_err(|(section, e)| {
            let at = line_of(text, section).map_or_else(|| origin.to_string(), |l| format!("{origin}:{l}"));
            CliError::Config(format!("{at}: invalid `{section}` section: {e}"))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Checks every section; on failure names the offending one.
    pub fn validate(&self) -> Result<(), (&'static str, DscaError)> {
        self.world.validate().map_err(|e| ("world", e))?;
        self.engine
            .validate_for_dim(self.world.d_f)
            .map_err(|e| ("engine", e))?;
        self.run.validate().map_err(|e| ("run", e))?;
        self.gradcheck.validate().map_err(|e| ("gradcheck", e))?;
        Ok(())
    }

    /// Large-scale hyperparameters and a feature width that fits them.
    pub fn apply_paper_profile(&mut self) {
        let p = EngineConfig::paper_profile();
        self.engine.r = p.r;
        self.engine.bottleneck = p.bottleneck;
        self.engine.n_min = p.n_min;
        self.engine.n_refine = p.n_refine;
        self.engine.tau = p.tau;
        self.engine.loss_weights = p.loss_weights;
        self.world.d_v = PAPER_PROFILE_DIM;
        self.world.d_t = PAPER_PROFILE_DIM;
        self.world.d_f = PAPER_PROFILE_DIM;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
