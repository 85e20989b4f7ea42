//! Offline training on expert data, online fine-tuning with hindsight
//! relabeling, and rollout helpers shared by every learned policy.

use std::fmt::Write as _;

use activedt_autodiff::{clip_global_norm, AdamConfig, AdamState};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{ReplayBuffer, DEFAULT_CAPACITY};
use crate::dt::{ActMode, DTConfig, DecisionTransformer, LossReport, RTGSchedule, TokenizedTrajectory};
use crate::env::{Action, Pose};
use crate::episode::EpisodeRecord;
use crate::error::{CoreError, Result};
use crate::policies::expert_action;
use crate::reinforce::MlpPolicy;
use crate::sim::Simulator;
use crate::trajectory::Trajectory;

pub const GRAD_CLIP: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    pub n_expert_trajectories: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            n_expert_trajectories: 1000,
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            lambda: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub episodes_per_round: usize,
    pub rounds: usize,
    pub train_steps_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub eval_every: usize,
    /// Stop when the best eval reward improves by less than 0.01 over this
    /// many rounds.
    pub early_stop_rounds: Option<usize>,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            episodes_per_round: 10,
            rounds: 100,
            train_steps_per_round: 200,
            batch_size: 64,
            lr: 1e-4,
            lambda: 0.0,
            temperature: 1.0,
            eval_every: 5,
            early_stop_rounds: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub offline: OfflineConfig,
    pub online: OnlineConfig,
    pub buffer_capacity: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            offline: OfflineConfig::default(),
            online: OnlineConfig::default(),
            buffer_capacity: DEFAULT_CAPACITY,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.offline;
        let n = &self.online;
        let checks = [
            ("buffer_capacity", self.buffer_capacity >= 1),
            ("offline.n_expert_trajectories", o.n_expert_trajectories >= 1),
            ("offline.epochs", o.epochs >= 1),
            ("offline.batch_size", o.batch_size >= 1),
            ("offline.lr", o.lr > 0.0),
            ("offline.lambda", o.lambda >= 0.0),
            ("online.episodes_per_round", n.episodes_per_round >= 1),
            ("online.train_steps_per_round", n.train_steps_per_round >= 1),
            ("online.batch_size", n.batch_size >= 1),
            ("online.lr", n.lr > 0.0),
            ("online.lambda", n.lambda >= 0.0),
            ("online.temperature", n.temperature > 0.0),
            ("online.eval_every", n.eval_every >= 1),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((key, _)) => Err(CoreError::Config(format!("{key} is out of range"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub ce: f64,
    pub entropy: f64,
    pub total: f64,
    pub eval_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub buffer_len: usize,
    pub buffer_mean_return: f64,
    pub collected_mean_return: f64,
    pub eval_reward: Option<f64>,
    /// Label of the parameter snapshot the evaluation used.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    pub rounds: Vec<RoundStats>,
}

impl TrainingLog {
    fn next_step(&self) -> usize {
        self.entries.last().map_or(0, |e| e.step + 1)
    }

    pub fn push_loss(&mut self, r: &LossReport) {
        let step = self.next_step();
        self.entries.push(LogEntry {
            step,
            ce: r.ce,
            entropy: r.entropy,
            total: r.total,
            eval_reward: None,
        });
    }

    /// Attaches an evaluation result to the most recent step.
    pub fn mark_eval(&mut self, reward: f64) {
        if let Some(e) = self.entries.last_mut() {
            e.eval_reward = Some(reward);
        }
    }

    pub fn append(&mut self, other: TrainingLog) {
        let offset = self.next_step();
        self.entries.extend(other.entries.into_iter().map(|mut e| {
            e.step += offset;
            e
        }));
        self.rounds.extend(other.rounds);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,ce,entropy,total,eval_reward\n");
        for e in &self.entries {
            let eval = e.eval_reward.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{}", e.step, e.ce, e.entropy, e.total, eval);
        }
        out
    }
}

/// Anything that can drive an episode.
#[derive(Clone, Copy)]
pub enum Agent<'a> {
    Expert,
    Random,
    Dt {
        model: &'a DecisionTransformer,
        mode: ActMode,
        initial_rtg: f64,
    },
    Mlp {
        model: &'a MlpPolicy,
        greedy: bool,
    },
}

impl Agent<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::Expert => "expert",
            Agent::Random => "random",
            Agent::Dt { .. } => "dt",
            Agent::Mlp { .. } => "reinforce",
        }
    }
}

/// Runs one episode. Decision Transformer rollouts condition on a
/// return-to-go schedule starting at `initial_rtg`.
pub fn rollout<R: Rng>(sim: &Simulator, scene: usize, start: Pose, agent: Agent<'_>, rng: &mut R) -> Result<EpisodeRecord> {
    match agent {
        Agent::Expert => sim.run(scene, start, |v| Ok(expert_action(&v.pose, v.scene))),
        Agent::Random => sim.run(scene, start, |_| Ok(Action::ALL[rng.gen_range(0..Action::ALL.len())])),
        Agent::Dt { model, mode, initial_rtg } => {
            let mut schedule = RTGSchedule::new(initial_rtg);
            let mut history = TokenizedTrajectory {
                rtg: Vec::new(),
                obs: Vec::new(),
                actions: Vec::new(),
                timesteps: Vec::new(),
            };
            sim.run(scene, start, |v| {
                if let Some(&r) = v.rewards.last() {
                    schedule.consume(r);
                    history.actions.push(v.actions[v.t - 1].index());
                }
                history.rtg.push(schedule.remaining);
                history.obs.push(v.observations[v.t].clone());
                history.timesteps.push(v.t);
                model.act(&history, &schedule, mode, rng)
            })
        }
        Agent::Mlp { model, greedy } => sim.run(scene, start, |v| model.act(&v.observations[v.t], greedy, rng)),
    }
}

/// Rolls out `count` episodes from starts drawn by [`Simulator::draw_start`]
/// and returns hindsight-relabeled trajectories.
pub fn collect_trajectories<R: Rng>(
    sim: &Simulator,
    agent: Agent<'_>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .map(|i| {
            let (s, start) = sim.draw_start(i, rng);
            rollout(sim, s, start, agent, rng).map(|ep| Trajectory::from_episode(&ep))
        })
        .collect()
}

fn tokenize(buffer: &ReplayBuffer, idx: &[usize], context_len: usize) -> Vec<TokenizedTrajectory> {
    idx.iter()
        .map(|&i| {
            let t = buffer.get(i).expect("sampled index in range");
            TokenizedTrajectory::window(t, t.len(), context_len)
        })
        .collect()
}

fn train_step<R: Rng>(
    model: &mut DecisionTransformer,
    adam: &mut AdamState,
    buffer: &ReplayBuffer,
    batch_size: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<LossReport> {
    let idx = buffer.sample_indices(batch_size, rng)?;
    let batch = tokenize(buffer, &idx, model.config.context_len);
    let (report, mut grads) = model.loss_and_grads(&batch, lambda)?;
    if !report.total.is_finite() {
        return Err(CoreError::Diverged(format!("loss became {}", report.total)));
    }
    clip_global_norm(&mut grads, GRAD_CLIP);
    adam.step(&mut model.params, &grads)?;
    Ok(report)
}

/// Supervised training on a fixed buffer: `epochs × ⌈len / batch⌉` steps of
/// `ce − λ·entropy` on variance-proportional batches.
pub fn offline_stage<R: Rng>(
    model: &mut DecisionTransformer,
    buffer: &ReplayBuffer,
    cfg: &OfflineConfig,
    rng: &mut R,
) -> Result<TrainingLog> {
    if buffer.is_empty() {
        return Err(CoreError::EmptyBuffer);
    }
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let steps = cfg.epochs * buffer.len().div_ceil(cfg.batch_size);
    let mut log = TrainingLog::default();
    for _ in 0..steps {
        let report = train_step(model, &mut adam, buffer, cfg.batch_size, cfg.lambda, rng)?;
        log.push_loss(&report);
    }
    Ok(log)
}

/// Greedy evaluation from fixed starts; returns the mean episode reward.
pub fn evaluate_mean<R: Rng>(
    sim: &Simulator,
    agent: Agent<'_>,
    starts: &[(usize, Pose)],
    rng: &mut R,
) -> Result<f64> {
    if starts.is_empty() {
        return Err(CoreError::EmptyResults);
    }
    let mut total = 0.0;
    for &(s, p) in starts {
        total += rollout(sim, s, p, agent, rng)?.total_reward();
    }
    Ok(total / starts.len() as f64)
}

fn mean_return<'a>(trajs: impl Iterator<Item = &'a Trajectory>) -> f64 {
    let (sum, n) = trajs.fold((0.0, 0usize), |(s, n), t| (s + t.total_reward(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Online fine-tuning: each round collects sampled rollouts conditioned on
/// `R̂_0 = horizon`, relabels them, pushes them FIFO into `buffer` and takes
/// gradient steps. Evaluation is greedy on `eval_starts`.
pub fn online_stage<R: Rng>(
    model: &mut DecisionTransformer,
    buffer: &mut ReplayBuffer,
    sim: &Simulator,
    cfg: &OnlineConfig,
    eval_starts: &[(usize, Pose)],
    rng: &mut R,
) -> Result<TrainingLog> {
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let initial_rtg = sim.horizon as f64;
    let mut log = TrainingLog::default();
    let mut best_history: Vec<f64> = Vec::new();
    let mut draw = 0usize;
    for round in 1..=cfg.rounds {
        let agent = Agent::Dt {
            model,
            mode: ActMode::Sample {
                temperature: cfg.temperature,
            },
            initial_rtg,
        };
        let mut fresh = Vec::with_capacity(cfg.episodes_per_round);
        for _ in 0..cfg.episodes_per_round {
            let (s, start) = sim.draw_start(draw, rng);
            draw += 1;
            let ep = rollout(sim, s, start, agent, rng)?;
            fresh.push(Trajectory::from_episode(&ep));
        }
        let collected_mean_return = mean_return(fresh.iter());
        buffer.extend(fresh);
        for _ in 0..cfg.train_steps_per_round {
            let report = train_step(model, &mut adam, buffer, cfg.batch_size, cfg.lambda, rng)?;
            log.push_loss(&report);
        }
        let mut stats = RoundStats {
            round,
            buffer_len: buffer.len(),
            buffer_mean_return: mean_return(buffer.iter()),
            collected_mean_return,
            eval_reward: None,
            checkpoint: None,
        };
        if round % cfg.eval_every == 0 && !eval_starts.is_empty() {
            let greedy = Agent::Dt {
                model,
                mode: ActMode::Greedy,
                initial_rtg,
            };
            let reward = evaluate_mean(sim, greedy, eval_starts, rng)?;
            log.mark_eval(reward);
            stats.eval_reward = Some(reward);
            stats.checkpoint = Some(format!("round-{round}"));
        }
        let eval = stats.eval_reward;
        log.rounds.push(stats);
        if let Some(r) = eval {
            let best = best_history.last().copied().unwrap_or(f64::NEG_INFINITY).max(r);
            best_history.push(best);
        }
        if let (Some(window), Some(_)) = (cfg.early_stop_rounds, eval) {
            let evals_back = window.div_ceil(cfg.eval_every);
            if best_history.len() > evals_back {
                let now = best_history[best_history.len() - 1];
                let then = best_history[best_history.len() - 1 - evals_back];
                if now - then < 0.01 {
                    break;
                }
            }
        }
    }
    Ok(log)
}

/// Outcome of [`run_two_stage`]: the Stage 1 snapshot, the fine-tuned model,
/// the concatenated log and the final buffer.
#[derive(Debug)]
pub struct TwoStageRun {
    pub offline: DecisionTransformer,
    pub online: DecisionTransformer,
    pub log: TrainingLog,
    pub buffer: ReplayBuffer,
}

/// Fills the buffer with `seed_agent` rollouts, trains offline, then
/// fine-tunes online. `Agent::Expert` gives DT-Online-Expert and
/// `Agent::Random` gives DT-Online-Random.
pub fn run_two_stage<R: Rng>(
    sim: &Simulator,
    dt_config: DTConfig,
    cfg: &StageConfig,
    seed_agent: Agent<'_>,
    eval_starts: &[(usize, Pose)],
    rng: &mut R,
) -> Result<TwoStageRun> {
    cfg.validate()?;
    let trajs = collect_trajectories(sim, seed_agent, cfg.offline.n_expert_trajectories, rng)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    buffer.extend(trajs);
    let mut model = DecisionTransformer::new(dt_config, cfg.seed)?;
    let mut log = offline_stage(&mut model, &buffer, &cfg.offline, rng)?;
    let offline = model.clone();
    let online_log = online_stage(&mut model, &mut buffer, sim, &cfg.online, eval_starts, rng)?;
    log.append(online_log);
    Ok(TwoStageRun {
        offline,
        online: model,
        log,
        buffer,
    })
}
