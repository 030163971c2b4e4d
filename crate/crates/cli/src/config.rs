use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pibc_core::biped::{biped_tree, BipedDims};
use pibc_core::correction::CorrectionGains;
use pibc_core::features::{ContactThresholds, DatasetConfig, WindowConfig};
use pibc_core::kinematics::KinematicTree;
use pibc_core::rollout::{ReferenceWalk, RolloutConfig};
use pibc_core::synth::CorpusConfig;
use pibc_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.toml";

/// Everything a run needs, as one TOML document. Every section and field
/// is optional in the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub robot: RobotConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub rollout: RolloutSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotConfig {
    /// Joints beyond the six leg joints.
    pub extra_joints: usize,
    pub dims: BipedDims,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            extra_joints: 0,
            dims: BipedDims::default(),
        }
    }
}

impl RobotConfig {
    pub fn tree(&self) -> KinematicTree {
        biped_tree(self.extra_joints, &self.dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub episodes: usize,
    pub episode_duration: f64,
    pub seed: u64,
    pub asymmetry: f64,
    pub clearance: f64,
    pub forward_fraction: f64,
    pub mirror: bool,
    pub contacts: ContactThresholds,
    pub window: WindowConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            episodes: c.episodes,
            episode_duration: c.episode_duration,
            seed: c.seed,
            asymmetry: c.asymmetry,
            clearance: c.clearance,
            forward_fraction: c.forward_fraction,
            mirror: false,
            contacts: ContactThresholds::default(),
            window: WindowConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            episodes: self.episodes,
            episode_duration: self.episode_duration,
            seed: self.seed,
            asymmetry: self.asymmetry,
            clearance: self.clearance,
            forward_fraction: self.forward_fraction,
        }
    }

    pub fn dataset(&self, test_fraction: f64) -> DatasetConfig {
        DatasetConfig {
            window: self.window,
            contacts: self.contacts,
            mirror: self.mirror,
            test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub run: TrainConfig,
    /// PI weights of a sweep; empty means a single run.
    pub sweep: Vec<f64>,
    /// Seeds per weight in a sweep, starting at `run.seed`.
    pub seeds: u64,
    pub jobs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            run: TrainConfig::default(),
            sweep: Vec::new(),
            seeds: 1,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSection {
    pub steps: usize,
    pub rate_hz: f64,
    pub correction: bool,
    pub k0: f64,
    pub k1: f64,
    /// Weight of the waypoint-derived velocity command in the current and
    /// future input slots, in [0, 1].
    pub command_blend: f64,
    pub reference: ReferenceWalk,
    /// Waypoint CSV; the reference walk's poses are used when absent.
    pub waypoints: Option<PathBuf>,
    pub contacts: ContactThresholds,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        Self {
            steps: r.steps,
            rate_hz: r.rate_hz,
            correction: r.correction,
            k0: r.gains.k0,
            k1: r.gains.k1,
            command_blend: r.command_blend,
            reference: ReferenceWalk::default(),
            waypoints: None,
            contacts: r.contacts,
        }
    }
}

impl RolloutSection {
    pub fn config(&self, window: WindowConfig) -> Result<RolloutConfig> {
        Ok(RolloutConfig {
            steps: self.steps,
            rate_hz: self.rate_hz,
            gains: CorrectionGains::new(self.k0, self.k1)?,
            correction: self.correction,
            window,
            contacts: self.contacts,
            command_blend: self.command_blend,
        })
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The explicit file if given, else the resolved config stored in
    /// `fallback_dir`, else defaults.
    pub fn resolve(explicit: Option<&Path>, fallback_dir: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        if let Some(dir) = fallback_dir {
            let p = dir.join(RESOLVED_CONFIG);
            if p.exists() {
                return Self::load(&p);
            }
        }
        Ok(Self::default())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(dir.join(RESOLVED_CONFIG), text)?;
        Ok(())
    }
}
