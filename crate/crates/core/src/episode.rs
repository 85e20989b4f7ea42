//! Fixed-horizon episode execution shared by data collection and evaluation.

use crate::detection::{observe, ChannelMask, SensorConfig};
use crate::env::{step, Action, Pose};
use crate::error::Result;
use crate::scenario::Scene;

/// What a policy may look at before choosing the action at step `t`.
pub struct EpisodeView<'a> {
    pub t: usize,
    pub horizon: usize,
    pub pose: Pose,
    pub stopped: bool,
    pub scene: &'a Scene,
    /// Observations `o_0..=o_t`.
    pub observations: &'a [Vec<f64>],
    /// Actions `a_0..a_{t-1}`.
    pub actions: &'a [Action],
    /// Rewards `r_0..r_{t-1}`.
    pub rewards: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub scene_id: String,
    pub init_pose: Pose,
    /// Pose before each action, plus the final pose.
    pub poses: Vec<Pose>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

impl EpisodeRecord {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs exactly `horizon` steps from `start` under stop-freeze semantics.
pub fn run_episode(
    scene: &Scene,
    start: Pose,
    horizon: usize,
    sensors: &SensorConfig,
    mask: ChannelMask,
    mut policy: impl FnMut(&EpisodeView<'_>) -> Result<Action>,
) -> Result<EpisodeRecord> {
    scene.grid.check_pose(&start)?;
    let mut pose = start;
    let mut stopped = false;
    let mut poses = vec![start];
    let mut observations = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for t in 0..horizon {
        observations.push(observe(&pose, scene, sensors, mask).to_vec());
        let view = EpisodeView {
            t,
            horizon,
            pose,
            stopped,
            scene,
            observations: &observations,
            actions: &actions,
            rewards: &rewards,
        };
        let action = policy(&view)?;
        let out = step(&pose, action, scene, stopped)?;
        actions.push(action);
        rewards.push(out.reward);
        pose = out.next_pose;
        stopped = out.stopped;
        poses.push(pose);
    }
    Ok(EpisodeRecord {
        scene_id: scene.id(),
        init_pose: start,
        poses,
        observations,
        actions,
        rewards,
    })
}

/// Re-simulates an action sequence and returns the per-step rewards.
pub fn replay_actions(scene: &Scene, start: Pose, actions: &[Action]) -> Result<Vec<f64>> {
    let mut pose = start;
    let mut stopped = false;
    let mut rewards = Vec::with_capacity(actions.len());
    for &a in actions {
        let out = step(&pose, a, scene, stopped)?;
        rewards.push(out.reward);
        pose = out.next_pose;
        stopped = out.stopped;
    }
    Ok(rewards)
}
