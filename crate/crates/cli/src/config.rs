//! Run configuration file: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use wsp_core::data::{GeneratorConfig, PrepConfig};
use wsp_core::encoders::EncoderConfig;
use wsp_core::evaluation::ProbeConfig;
use wsp_core::losses::LossConfig;
use wsp_core::trainer::OptimConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub generator: GeneratorConfig,
    pub prep: PrepConfig,
}

/// Everything a command needs besides its input files.
///
/// `loss` is the single source of loss settings (it replaces `optim.loss`),
/// and the top-level `seed` drives the encoder, trainer, probe and generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub probe: ProbeConfig,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| crate::UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Propagate the shared seed and loss section into the component configs.
    pub fn resolve(&mut self) {
        self.optim.loss = self.loss;
        self.encoder.seed = self.seed;
        self.optim.seed = self.seed;
        self.probe.seed = self.seed;
    }

    /// Write the effective config as `run_config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("run_config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
