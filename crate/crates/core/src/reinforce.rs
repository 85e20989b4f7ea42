//! Markovian policy-gradient baseline: a two-layer MLP trained with
//! REINFORCE and a running-mean return baseline.

use std::collections::BTreeMap;

use activedt_autodiff::{clip_global_norm, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dt::{argmax, init_linear, linear, sample_categorical, softmax_with_temperature, LossReport};
use crate::env::{Action, Pose, N_ACTIONS};
use crate::error::{CoreError, Result};
use crate::sim::Simulator;
use crate::training::{evaluate_mean, rollout, Agent, TrainingLog, GRAD_CLIP};
use crate::trajectory::compute_rtg;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpPolicy {
    pub obs_dim: usize,
    pub hidden: usize,
    pub params: ParamStore,
}

impl MlpPolicy {
    pub fn new(obs_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_linear(&mut params, &mut rng, "fc1", obs_dim, hidden);
        init_linear(&mut params, &mut rng, "fc2", hidden, N_ACTIONS);
        Self { obs_dim, hidden, params }
    }

    pub fn logits(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, obs.len()], obs.to_vec())?);
        let h = linear(&mut tape, &p, "fc1", x)?;
        let h = tape.tanh(h);
        let z = linear(&mut tape, &p, "fc2", h)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn act<R: Rng>(&self, obs: &[f64], greedy: bool, rng: &mut R) -> Result<Action> {
        let logits = self.logits(obs)?;
        let idx = if greedy {
            argmax(&logits)
        } else {
            sample_categorical(&softmax_with_temperature(&logits, 1.0), rng)
        };
        Action::from_index(idx)
    }

    /// `Σ_i w_i · CE(a_i | o_i)`. With `w_i = (G_i − b_i) / n` its gradient is
    /// the REINFORCE estimate `−Σ (G − b) ∇ log π / n`.
    pub fn weighted_loss_and_grads(
        &self,
        obs: &[Vec<f64>],
        actions: &[usize],
        weights: &[f64],
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        if obs.is_empty() {
            return Err(CoreError::NoValidPositions);
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let flat: Vec<f64> = obs.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::new(vec![obs.len(), self.obs_dim], flat)?);
        let h = linear(&mut tape, &p, "fc1", x)?;
        let h = tape.tanh(h);
        let z = linear(&mut tape, &p, "fc2", h)?;
        let loss = tape.cross_entropy_from_logits(z, actions, weights)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), p.gradients(&tape, &grads)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReinforceConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            iterations: 200,
            episodes_per_iteration: 16,
            lr: 1e-3,
            eval_every: 20,
            seed: 0,
        }
    }
}

/// Per-timestep running mean of observed returns-to-go.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningBaseline {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl RunningBaseline {
    pub fn new(horizon: usize) -> Self {
        Self {
            sums: vec![0.0; horizon],
            counts: vec![0; horizon],
        }
    }

    pub fn value(&self, t: usize) -> f64 {
        if self.counts[t] == 0 {
            0.0
        } else {
            self.sums[t] / self.counts[t] as f64
        }
    }

    pub fn update(&mut self, returns: &[f64]) {
        for (t, g) in returns.iter().enumerate() {
            self.sums[t] += g;
            self.counts[t] += 1;
        }
    }
}

/// Trains an MLP policy with REINFORCE on starts drawn from `sim`.
pub fn reinforce_baseline<R: Rng>(
    sim: &Simulator,
    cfg: &ReinforceConfig,
    eval_starts: &[(usize, Pose)],
    rng: &mut R,
) -> Result<(MlpPolicy, TrainingLog)> {
    let mut policy = MlpPolicy::new(sim.obs_dim(), cfg.hidden, cfg.seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut baseline = RunningBaseline::new(sim.horizon);
    let mut log = TrainingLog::default();
    let mut draw = 0;
    for it in 1..=cfg.iterations {
        let mut obs = Vec::new();
        let mut actions = Vec::new();
        let mut advantages = Vec::new();
        let mut batch_returns = Vec::new();
        for _ in 0..cfg.episodes_per_iteration {
            let (s, start) = sim.draw_start(draw, rng);
            draw += 1;
            let agent = Agent::Mlp {
                model: &policy,
                greedy: false,
            };
            let ep = rollout(sim, s, start, agent, rng)?;
            let g = compute_rtg(&ep.rewards);
            for t in 0..ep.actions.len() {
                obs.push(ep.observations[t].clone());
                actions.push(ep.actions[t].index());
                advantages.push(g[t] - baseline.value(t));
            }
            batch_returns.push(g);
        }
        for g in &batch_returns {
            baseline.update(g);
        }
        let n = obs.len() as f64;
        let weights: Vec<f64> = advantages.iter().map(|a| a / n).collect();
        let (loss, mut grads) = policy.weighted_loss_and_grads(&obs, &actions, &weights)?;
        if !loss.is_finite() {
            return Err(CoreError::Diverged(format!("loss became {loss}")));
        }
        clip_global_norm(&mut grads, GRAD_CLIP);
        adam.step(&mut policy.params, &grads)?;
        let mean_return = batch_returns.iter().map(|g| g[0]).sum::<f64>() / batch_returns.len() as f64;
        log.push_loss(&LossReport {
            ce: loss,
            entropy: 0.0,
            total: loss,
        });
        log.rounds.push(crate::training::RoundStats {
            round: it,
            buffer_len: 0,
            buffer_mean_return: mean_return,
            collected_mean_return: mean_return,
            eval_reward: None,
            checkpoint: None,
        });
        if it % cfg.eval_every == 0 && !eval_starts.is_empty() {
            let agent = Agent::Mlp {
                model: &policy,
                greedy: true,
            };
            log.mark_eval(evaluate_mean(sim, agent, eval_starts, rng)?);
        }
    }
    Ok((policy, log))
}
