//! A scene set with start pools behind a step-counting simulator facade.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::detection::{ChannelMask, SensorConfig};
use crate::env::{Action, Pose};
use crate::episode::{run_episode, EpisodeRecord, EpisodeView};
use crate::error::{CoreError, Result};
use crate::scenario::{select_initial_poses, PoseRules, Scene};

#[derive(Debug)]
pub struct Simulator {
    pub scenes: Vec<Scene>,
    pub pools: Vec<Vec<Pose>>,
    pub sensors: SensorConfig,
    pub mask: ChannelMask,
    pub horizon: usize,
    env_steps: AtomicU64,
}

impl Simulator {
    pub fn new(scenes: Vec<Scene>, rules: &PoseRules, sensors: SensorConfig, mask: ChannelMask, horizon: usize) -> Result<Self> {
        if scenes.is_empty() {
            return Err(CoreError::Config("simulator needs at least one scene".into()));
        }
        if horizon == 0 {
            return Err(CoreError::Config("horizon must be at least 1".into()));
        }
        let pools = scenes
            .iter()
            .map(|s| select_initial_poses(s, rules))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scenes,
            pools,
            sensors,
            mask,
            horizon,
            env_steps: AtomicU64::new(0),
        })
    }

    /// Same scenes and pools observed through a different channel mask.
    pub fn with_mask(&self, mask: ChannelMask) -> Self {
        Self {
            scenes: self.scenes.clone(),
            pools: self.pools.clone(),
            sensors: self.sensors,
            mask,
            horizon: self.horizon,
            env_steps: AtomicU64::new(0),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.sensors.obs_dim()
    }

    /// Total environment steps taken through this simulator.
    pub fn env_steps(&self) -> u64 {
        self.env_steps.load(Ordering::Relaxed)
    }

    /// Start for the `i`-th draw: scenes in rotation, pose uniform from the pool.
    pub fn draw_start<R: Rng>(&self, i: usize, rng: &mut R) -> (usize, Pose) {
        let s = i % self.scenes.len();
        let pool = &self.pools[s];
        (s, pool[rng.gen_range(0..pool.len())])
    }

    pub fn run(
        &self,
        scene: usize,
        start: Pose,
        policy: impl FnMut(&EpisodeView<'_>) -> Result<Action>,
    ) -> Result<EpisodeRecord> {
        let scene = self
            .scenes
            .get(scene)
            .ok_or_else(|| CoreError::Config(format!("scene index {scene} out of range")))?;
        self.env_steps.fetch_add(self.horizon as u64, Ordering::Relaxed);
        run_episode(scene, start, self.horizon, &self.sensors, self.mask, policy)
    }
}
