//! Decision Transformer: (return-to-go, observation, action) token triplets
//! through a causal transformer that predicts the action at each observation.

use std::collections::BTreeMap;
use std::rc::Rc;

use activedt_autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, N_ACTIONS};
use crate::error::{CoreError, Result};
use crate::trajectory::Trajectory;

const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DTConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context length in timesteps.
    pub context_len: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub max_timestep: usize,
    /// Return-to-go inputs are divided by this before embedding.
    pub rtg_scale: f64,
}

impl DTConfig {
    pub fn new(obs_dim: usize, horizon: usize) -> Self {
        Self {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 2,
            context_len: horizon,
            obs_dim,
            n_actions: N_ACTIONS,
            max_timestep: horizon,
            rtg_scale: horizon as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.context_len == 0 || self.max_timestep == 0 || self.obs_dim == 0 || self.n_actions == 0 {
            return bad("context_len, max_timestep, obs_dim and n_actions must be positive".into());
        }
        if !(self.rtg_scale > 0.0) {
            return bad(format!("rtg_scale must be positive, got {}", self.rtg_scale));
        }
        Ok(())
    }
}

/// One sequence of (rtg, obs, action) triplets. The final action may be
/// absent, in which case the sequence ends on an observation token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedTrajectory {
    pub rtg: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub timesteps: Vec<usize>,
}

impl TokenizedTrajectory {
    pub fn steps(&self) -> usize {
        self.obs.len()
    }

    /// Number of tokens: three per step, minus a missing final action.
    pub fn token_len(&self) -> usize {
        3 * self.steps() - (self.steps() - self.actions.len())
    }

    /// The last `context_len` steps of `traj` ending at `end` (exclusive).
    pub fn window(traj: &Trajectory, end: usize, context_len: usize) -> Self {
        let start = end.saturating_sub(context_len);
        let steps = &traj.steps[start..end];
        Self {
            rtg: steps.iter().map(|s| s.rtg).collect(),
            obs: steps.iter().map(|s| s.obs.clone()).collect(),
            actions: steps.iter().map(|s| s.action.index()).collect(),
            timesteps: (start..end).collect(),
        }
    }

    fn check(&self, cfg: &DTConfig) -> Result<()> {
        let n = self.steps();
        let bad = |m: String| Err(CoreError::Config(m));
        if n == 0 || self.rtg.len() != n || self.timesteps.len() != n {
            return bad(format!(
                "sequence lengths disagree: {} obs, {} rtg, {} timesteps",
                n,
                self.rtg.len(),
                self.timesteps.len()
            ));
        }
        if self.actions.len() != n && self.actions.len() + 1 != n {
            return bad(format!("{} actions for {} observations", self.actions.len(), n));
        }
        if n > cfg.context_len {
            return bad(format!("{n} steps exceed context length {}", cfg.context_len));
        }
        if let Some(o) = self.obs.iter().find(|o| o.len() != cfg.obs_dim) {
            return bad(format!("observation of length {} (expected {})", o.len(), cfg.obs_dim));
        }
        if let Some(&a) = self.actions.iter().find(|&&a| a >= cfg.n_actions) {
            return Err(CoreError::InvalidAction(a));
        }
        if let Some(&t) = self.timesteps.iter().find(|&&t| t >= cfg.max_timestep) {
            return bad(format!("timestep {t} exceeds max_timestep {}", cfg.max_timestep));
        }
        Ok(())
    }
}

/// Inference-time return-to-go bookkeeping: starts at `initial` and is
/// reduced by each realized reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RTGSchedule {
    pub initial: f64,
    pub remaining: f64,
    consumed: f64,
}

impl RTGSchedule {
    pub fn new(initial: f64) -> Self {
        Self {
            initial,
            remaining: initial,
            consumed: 0.0,
        }
    }

    pub fn consume(&mut self, reward: f64) {
        self.consumed += reward;
        self.remaining = self.initial - self.consumed;
    }

    pub fn consumed(&self) -> f64 {
        self.consumed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Lowest index among maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Inverse-CDF draw from a discrete distribution.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("shape matches data")
}

/// Adds a `[fan_in, fan_out]` weight and a zero bias named `{name}.w`/`{name}.b`.
pub(crate) fn init_linear(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ps.insert(format!("{name}.w"), uniform_tensor(rng, &[fan_in, fan_out], bound));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn linear(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn init_norm(ps: &mut ParamStore, name: &str, dim: usize) {
    ps.insert(format!("{name}.g"), Tensor::filled(&[dim], 1.0));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

fn norm(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, b)?)
}

/// Logits for selected observation tokens, in `(sequence, step)` order.
struct Forward {
    logits: Var,
    rows: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTransformer {
    pub config: DTConfig,
    pub params: ParamStore,
}

impl DecisionTransformer {
    /// Fresh parameters. The output head starts at zero, so the initial
    /// policy is uniform.
    pub fn new(config: DTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed_dim;
        let mut ps = ParamStore::new();
        init_linear(&mut ps, &mut rng, "embed.rtg", 1, e);
        init_linear(&mut ps, &mut rng, "embed.obs", config.obs_dim, e);
        ps.insert("embed.action", uniform_tensor(&mut rng, &[config.n_actions, e], 0.1));
        ps.insert("embed.timestep", uniform_tensor(&mut rng, &[config.max_timestep, e], 0.1));
        init_norm(&mut ps, "embed.ln", e);
        for l in 0..config.n_layers {
            let b = format!("block{l}");
            init_norm(&mut ps, &format!("{b}.ln1"), e);
            for proj in ["q", "k", "v", "o"] {
                init_linear(&mut ps, &mut rng, &format!("{b}.attn.{proj}"), e, e);
            }
            init_norm(&mut ps, &format!("{b}.ln2"), e);
            init_linear(&mut ps, &mut rng, &format!("{b}.mlp.fc"), e, 4 * e);
            init_linear(&mut ps, &mut rng, &format!("{b}.mlp.proj"), 4 * e, e);
        }
        init_norm(&mut ps, "final.ln", e);
        ps.insert("head.w", Tensor::zeros(&[e, config.n_actions]));
        ps.insert("head.b", Tensor::zeros(&[config.n_actions]));
        Ok(Self { config, params: ps })
    }

    pub fn from_params(config: DTConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(CoreError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Records the forward pass. `select(b, t)` chooses which observation
    /// tokens produce logits.
    fn record(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &[TokenizedTrajectory],
        select: impl Fn(usize, usize) -> bool,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if batch.is_empty() {
            return Err(CoreError::NoValidPositions);
        }
        for seq in batch {
            seq.check(cfg)?;
        }
        let e = cfg.embed_dim;
        let bsz = batch.len();
        let s_max = batch.iter().map(|s| s.steps()).max().unwrap_or(0);
        let l = 3 * s_max;
        let slots = bsz * s_max;

        let mut rtg_in = vec![0.0; slots];
        let mut obs_in = vec![0.0; slots * cfg.obs_dim];
        let mut act_idx = vec![0usize; slots];
        let mut ts_idx = vec![0usize; slots];
        let mut valid = vec![false; bsz * l];
        let mut rows = Vec::new();
        let mut gather = Vec::new();
        for (b, seq) in batch.iter().enumerate() {
            let pad = s_max - seq.steps();
            for t in 0..seq.steps() {
                let slot = b * s_max + pad + t;
                rtg_in[slot] = seq.rtg[t] / cfg.rtg_scale;
                obs_in[slot * cfg.obs_dim..(slot + 1) * cfg.obs_dim].copy_from_slice(&seq.obs[t]);
                ts_idx[slot] = seq.timesteps[t];
                let base = b * l + 3 * (pad + t);
                valid[base] = true;
                valid[base + 1] = true;
                if let Some(&a) = seq.actions.get(t) {
                    act_idx[slot] = a;
                    valid[base + 2] = true;
                }
                if select(b, t) {
                    rows.push((b, t));
                    gather.push(base + 1);
                }
            }
        }
        if gather.is_empty() {
            return Err(CoreError::NoValidPositions);
        }
        // masked[b, i, j]: query i may not attend key j
        let mut masked = vec![true; bsz * l * l];
        for b in 0..bsz {
            for i in 0..l {
                for j in 0..=i {
                    masked[(b * l + i) * l + j] = !valid[b * l + j];
                }
            }
        }
        let masked = Rc::new(masked);

        let rtg_c = tape.constant(Tensor::new(vec![slots, 1], rtg_in)?);
        let obs_c = tape.constant(Tensor::new(vec![slots, cfg.obs_dim], obs_in)?);
        let ts = tape.embedding(p.get("embed.timestep")?, &ts_idx)?;
        let r = linear(tape, p, "embed.rtg", rtg_c)?;
        let r = tape.add(r, ts)?;
        let o = linear(tape, p, "embed.obs", obs_c)?;
        let o = tape.add(o, ts)?;
        let a = tape.embedding(p.get("embed.action")?, &act_idx)?;
        let a = tape.add(a, ts)?;
        let x = tape.concat_last(&[r, o, a])?;
        let x = tape.reshape(x, &[bsz, l, e])?;
        let mut x = norm(tape, p, "embed.ln", x)?;

        let dh = e / cfg.n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for layer in 0..cfg.n_layers {
            let name = format!("block{layer}");
            let h = norm(tape, p, &format!("{name}.ln1"), x)?;
            let q = linear(tape, p, &format!("{name}.attn.q"), h)?;
            let k = linear(tape, p, &format!("{name}.attn.k"), h)?;
            let v = linear(tape, p, &format!("{name}.attn.v"), h)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hi in 0..cfg.n_heads {
                let qh = tape.slice_last(q, hi * dh, dh)?;
                let kh = tape.slice_last(k, hi * dh, dh)?;
                let vh = tape.slice_last(v, hi * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let scores = tape.masked_fill(scores, Rc::clone(&masked), MASK_FILL)?;
                let att = tape.softmax(scores);
                heads.push(tape.matmul(att, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_last(&heads)? };
            let proj = linear(tape, p, &format!("{name}.attn.o"), cat)?;
            x = tape.add(x, proj)?;
            let h = norm(tape, p, &format!("{name}.ln2"), x)?;
            let m = linear(tape, p, &format!("{name}.mlp.fc"), h)?;
            let m = tape.gelu(m);
            let m = linear(tape, p, &format!("{name}.mlp.proj"), m)?;
            x = tape.add(x, m)?;
        }
        let x = norm(tape, p, "final.ln", x)?;
        let flat = tape.reshape(x, &[bsz * l, e])?;
        let sel = tape.gather_rows(flat, &gather)?;
        let logits = linear(tape, p, "head", sel)?;
        Ok(Forward { logits, rows })
    }

    /// Action logits at every observation token, per sequence and step.
    pub fn forward(&self, batch: &[TokenizedTrajectory]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let fwd = self.record(&mut tape, &p, batch, |_, _| true)?;
        let n_act = self.config.n_actions;
        let mut out: Vec<Vec<Vec<f64>>> = batch.iter().map(|s| Vec::with_capacity(s.steps())).collect();
        for (row, &(b, _)) in tape.value(fwd.logits).data().chunks(n_act).zip(&fwd.rows) {
            out[b].push(row.to_vec());
        }
        Ok(out)
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &[TokenizedTrajectory],
        lambda: f64,
    ) -> Result<(Var, Var, Var)> {
        let fwd = self.record(tape, p, batch, |b, t| t < batch[b].actions.len())?;
        let n = fwd.rows.len();
        let targets: Vec<usize> = fwd.rows.iter().map(|&(b, t)| batch[b].actions[t]).collect();
        let weights = vec![1.0 / n as f64; n];
        let ce = tape.cross_entropy_from_logits(fwd.logits, &targets, &weights)?;
        let ent = tape.entropy_from_logits(fwd.logits, &weights)?;
        let neg = tape.scale(ent, -lambda);
        let total = tape.add(ce, neg)?;
        Ok((ce, ent, total))
    }

    /// `ce − λ·entropy`, both averaged over supervised observation tokens.
    pub fn loss(&self, batch: &[TokenizedTrajectory], lambda: f64) -> Result<LossReport> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let (ce, ent, total) = self.record_loss(&mut tape, &p, batch, lambda)?;
        Ok(LossReport {
            ce: tape.value(ce).item(),
            entropy: tape.value(ent).item(),
            total: tape.value(total).item(),
        })
    }

    /// Loss report and the gradient of `total` for every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &[TokenizedTrajectory],
        lambda: f64,
    ) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let (ce, ent, total) = self.record_loss(&mut tape, &p, batch, lambda)?;
        let grads = tape.backward(total)?;
        let report = LossReport {
            ce: tape.value(ce).item(),
            entropy: tape.value(ent).item(),
            total: tape.value(total).item(),
        };
        Ok((report, p.gradients(&tape, &grads)))
    }

    /// Logits for the newest observation of `history`, whose final
    /// return-to-go token is replaced by `schedule.remaining`. Only the last
    /// `context_len` steps are used.
    pub fn action_logits(&self, history: &TokenizedTrajectory, schedule: &RTGSchedule) -> Result<Vec<f64>> {
        let n = history.steps();
        if n == 0 || history.actions.len() + 1 != n {
            return Err(CoreError::Config(
                "history must end on an observation without an action".into(),
            ));
        }
        let start = n.saturating_sub(self.config.context_len);
        let mut seq = TokenizedTrajectory {
            rtg: history.rtg[start..].to_vec(),
            obs: history.obs[start..].to_vec(),
            actions: history.actions[start..].to_vec(),
            timesteps: history.timesteps[start..].to_vec(),
        };
        *seq.rtg.last_mut().expect("non-empty") = schedule.remaining;
        let last = seq.steps() - 1;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let fwd = self.record(&mut tape, &p, std::slice::from_ref(&seq), |_, t| t == last)?;
        Ok(tape.value(fwd.logits).data().to_vec())
    }

    pub fn action_distribution(
        &self,
        history: &TokenizedTrajectory,
        schedule: &RTGSchedule,
        temperature: f64,
    ) -> Result<Vec<f64>> {
        Ok(softmax_with_temperature(&self.action_logits(history, schedule)?, temperature))
    }

    pub fn act<R: Rng>(
        &self,
        history: &TokenizedTrajectory,
        schedule: &RTGSchedule,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Action> {
        let logits = self.action_logits(history, schedule)?;
        let idx = match mode {
            ActMode::Greedy => argmax(&logits),
            ActMode::Sample { temperature } => {
                sample_categorical(&softmax_with_temperature(&logits, temperature), rng)
            }
        };
        Action::from_index(idx)
    }
}
