//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use mracl::synth::{SceneConfig, SplitSizes};
use mracl::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub sizes: SplitSizes,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

/// Sweep axes for `ablate`. Margins use `train.hyper.margin_unit`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub factor_grid: bool,
    pub margin: Vec<f64>,
    pub nu: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        !self.factor_grid && self.margin.is_empty() && self.nu.is_empty() && self.alpha.is_empty()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            cfg.scene.seed = s;
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "invalid config field `version`: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        self.scene.validate()?;
        self.train.validate()?;
        let bad = |field: &str, msg: &str| Err(CliError::Config(format!("invalid config field `{field}`: {msg}")));
        if self.sizes.train == 0 || self.sizes.test_static == 0 || self.sizes.test_motion == 0 {
            return bad("sizes", "every split needs at least one sample");
        }
        if self.sweep.margin.iter().any(|m| !(*m >= 0.0)) {
            return bad("sweep.margin", "margins must be >= 0");
        }
        if self.sweep.nu.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return bad("sweep.nu", "thresholds must lie in [-1, 1]");
        }
        if self.sweep.alpha.iter().any(|a| !(*a >= 0.0)) {
            return bad("sweep.alpha", "weights must be >= 0");
        }
        Ok(())
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))
    }
}
