//! Recorded episodes and the JSON-lines trajectory file format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{Action, Pose};
use crate::episode::EpisodeRecord;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    /// Reward-to-go conditioning value at this step.
    pub rtg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scene_ref: String,
    pub init_pose: Pose,
    pub steps: Vec<Step>,
    pub rtg_0: f64,
}

/// Suffix sums `rtg[t] = Σ_{t' >= t} rewards[t']`, accumulated from the end.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

impl Trajectory {
    /// Builds a trajectory with hindsight returns from a finished episode.
    pub fn from_episode(ep: &EpisodeRecord) -> Self {
        let steps = ep
            .observations
            .iter()
            .zip(&ep.actions)
            .zip(&ep.rewards)
            .map(|((obs, &action), &reward)| Step {
                obs: obs.clone(),
                action,
                reward,
                rtg: 0.0,
            })
            .collect();
        let mut traj = Trajectory {
            scene_ref: ep.scene_id.clone(),
            init_pose: ep.init_pose,
            steps,
            rtg_0: 0.0,
        };
        traj.relabel();
        traj
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Replaces stored RTGs with suffix sums of the realized rewards.
    pub fn relabel(&mut self) {
        let rtg = compute_rtg(&self.rewards());
        for (s, g) in self.steps.iter_mut().zip(&rtg) {
            s.rtg = *g;
        }
        self.rtg_0 = rtg.first().copied().unwrap_or(0.0);
    }

    /// `rtg[t] - rtg[t+1] == reward[t]` exactly, with `rtg[T] = 0`.
    pub fn rtg_consistent(&self) -> bool {
        let n = self.steps.len();
        (0..n).all(|t| {
            let next = if t + 1 < n { self.steps[t + 1].rtg } else { 0.0 };
            self.steps[t].rtg - next == self.steps[t].reward
        }) && self.steps.first().map_or(true, |s| s.rtg == self.rtg_0)
    }

    /// Population variance of the per-step rewards.
    pub fn reward_variance(&self) -> f64 {
        let n = self.steps.len();
        if n == 0 {
            return 0.0;
        }
        let mean = self.total_reward() / n as f64;
        self.steps.iter().map(|s| (s.reward - mean).powi(2)).sum::<f64>() / n as f64
    }
}

/// Returns a relabeled copy of `traj`.
pub fn hindsight_relabel(traj: &Trajectory) -> Trajectory {
    let mut out = traj.clone();
    out.relabel();
    out
}

pub fn write_jsonl<W: Write>(mut w: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)
            .map_err(|e| CoreError::Format(format!("trajectory line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}
