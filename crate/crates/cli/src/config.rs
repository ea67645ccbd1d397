//! Run configuration: defaults, an optional TOML file, then flag overrides.

use std::fs;
use std::path::Path;

use altsim_core::eval::{EvalMode, DEFAULT_HORIZONS};
use altsim_core::network::{ModelKind, NetSpec, Skip};
use altsim_core::physics::{MotionKind, SimConfig};
use altsim_core::train::TrainConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshChoice {
    Grid,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub mesh: MeshChoice,
    pub nx: usize,
    pub ny: usize,
    /// Grid spacing, m.
    pub spacing: f64,
    /// Ring node count.
    pub nodes: usize,
    /// Ring radius, m.
    pub radius: f64,
    /// Simulated frames per sequence after frame 0.
    pub frames: usize,
    pub sequences: usize,
    pub seed: u64,
    pub motions: Vec<MotionKind>,
    /// Seconds after which every driver freezes.
    pub stop_after: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mesh: MeshChoice::Grid,
            nx: 8,
            ny: 8,
            spacing: 0.02,
            nodes: 64,
            radius: 0.1,
            frames: 50,
            sequences: 16,
            seed: 0,
            motions: MotionKind::MOVING.to_vec(),
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: String,
    pub schedule: Vec<usize>,
    /// Accumulation skips as `[to, from]` layer pairs.
    pub skips: Vec<[usize; 2]>,
    /// Accept schedules that are not encoder-decoder shaped.
    pub force: bool,
    pub seed: u64,
    /// Factor applied to every initial weight and bias.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let desk = NetSpec::desk();
        Self {
            kind: "alt".into(),
            schedule: desk.channel_schedule,
            skips: desk.skips.iter().map(|s| [s.to, s.from]).collect(),
            force: false,
            seed: 0,
            init_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn kind(&self) -> Result<ModelKind> {
        self.kind
            .parse()
            .map_err(|e| UsageError::new(format!("model: {e}")).into())
    }

    pub fn init_gain(&self) -> Result<f64> {
        if self.init_gain.is_finite() && self.init_gain > 0.0 {
            Ok(self.init_gain)
        } else {
            Err(UsageError::new(format!("model: init_gain must be positive, got {}", self.init_gain)).into())
        }
    }

    pub fn net_spec(&self) -> Result<NetSpec> {
        let skips = self.skips.iter().map(|&[to, from]| Skip { to, from }).collect();
        NetSpec::new(self.schedule.clone(), skips, self.force)
            .map_err(|e| UsageError::new(format!("model: {e}")).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub modes: Vec<EvalMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: DEFAULT_HORIZONS.to_vec(),
            modes: EvalMode::BOTH.to_vec(),
        }
    }
}

/// Every section a command may read. Commands echo the whole effective
/// configuration into their output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError::new(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| UsageError::new(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing the effective configuration")
    }

    /// Writes `config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("config.toml"), self.to_toml()?)
            .with_context(|| format!("writing {}", dir.join("config.toml").display()))
    }
}

/// Overwrites `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
