//! Versioned JSON configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{ChannelMask, DetectorParams, SensorConfig};
use crate::dt::DTConfig;
use crate::error::{CoreError, Result};
use crate::eval::SuiteSpec;
use crate::reinforce::ReinforceConfig;
use crate::scenario::{GenParams, PoseRules};
use crate::training::StageConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "ACTIVE_DT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesSection {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub rules: PoseRules,
}

impl Default for ScenesSection {
    fn default() -> Self {
        let g = GenParams::default();
        Self {
            width: g.width,
            height: g.height,
            cell_size: g.cell_size,
            rules: PoseRules::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtSection {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for DtSection {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub stages: StageConfig,
    pub reinforce: ReinforceConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            stages: StageConfig::default(),
            reinforce: ReinforceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub suite: SuiteSpec,
    pub mask: ChannelMask,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            suite: SuiteSpec::default(),
            mask: ChannelMask::FULL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkbenchConfig {
    pub version: u32,
    pub seed: Option<u64>,
    pub scenes: ScenesSection,
    pub detector: DetectorParams,
    pub sensors: SensorConfig,
    pub dt: DtSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            scenes: ScenesSection::default(),
            detector: DetectorParams::default(),
            sensors: SensorConfig::default(),
            dt: DtSection::default(),
            training: TrainingSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl WorkbenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            CoreError::Config(msg) => CoreError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            width: self.scenes.width,
            height: self.scenes.height,
            cell_size: self.scenes.cell_size,
            detector: self.detector,
        }
    }

    pub fn dt_config(&self) -> DTConfig {
        DTConfig {
            embed_dim: self.dt.embed_dim,
            n_layers: self.dt.n_layers,
            n_heads: self.dt.n_heads,
            ..DTConfig::new(self.sensors.obs_dim(), self.eval.suite.horizon)
        }
    }

    /// Rejects out-of-range values, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CoreError::Config(format!(
                "version: expected {CONFIG_VERSION}, found {}",
                self.version
            )));
        }
        let s = &self.eval.suite;
        let checks = [
            ("scenes.width", self.scenes.width >= 3),
            ("scenes.height", self.scenes.height >= 3),
            ("scenes.cell_size", self.scenes.cell_size > 0.0),
            ("eval.suite.categories", !s.categories.is_empty()),
            ("eval.suite.scenes_per_category", s.scenes_per_category >= 1),
            ("eval.suite.starts_per_scene", s.starts_per_scene >= 1),
            ("eval.suite.horizon", s.horizon >= 1),
            ("training.reinforce.hidden", self.training.reinforce.hidden >= 1),
            ("training.reinforce.episodes_per_iteration", self.training.reinforce.episodes_per_iteration >= 1),
            ("training.reinforce.lr", self.training.reinforce.lr > 0.0),
            ("training.reinforce.eval_every", self.training.reinforce.eval_every >= 1),
        ];
        if let Some((key, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(CoreError::Config(format!("{key} is out of range")));
        }
        self.detector
            .validate()
            .map_err(|e| CoreError::Config(format!("detector: {}", strip_prefix(&e))))?;
        self.training
            .stages
            .validate()
            .map_err(|e| CoreError::Config(format!("training.stages.{}", strip_prefix(&e))))?;
        self.dt_config()
            .validate()
            .map_err(|e| CoreError::Config(format!("dt: {}", strip_prefix(&e))))?;
        Ok(())
    }

    /// Seed precedence: explicit flag, then the config file, then the
    /// environment, then zero.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CoreError::Config(format!("{SEED_ENV}: `{v}` is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }
}

fn strip_prefix(e: &CoreError) -> String {
    let msg = e.to_string();
    msg.strip_prefix("invalid configuration: ").unwrap_or(&msg).to_string()
}
