use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use activedt_core::buffer::ReplayBuffer;
use activedt_core::checkpoint::Checkpoint;
use activedt_core::config::WorkbenchConfig;
use activedt_core::detection::{detect, ChannelMask};
use activedt_core::dt::{ActMode, DecisionTransformer};
use activedt_core::env::Pose;
use activedt_core::eval::{results_csv, summarize, EpisodeResult, MetricsSummary, Suite};
use activedt_core::policies::ValueTable;
use activedt_core::reinforce::{reinforce_baseline, MlpPolicy};
use activedt_core::scenario::{generate_scene, Category};
use activedt_core::training::{collect_trajectories, offline_stage, online_stage, rollout, run_two_stage, Agent};
use activedt_core::trajectory::{compute_rtg, read_jsonl, write_jsonl};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "active-dt", version, about = "Decision Transformer workbench for active object detection")]
struct Cli {
    /// JSON configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (falls back to the config, then ACTIVE_DT_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    All,
    Open,
    Sparse,
    Cluttered,
    Trap,
}

impl SuiteArg {
    fn categories(self) -> Option<Vec<Category>> {
        match self {
            SuiteArg::All => None,
            SuiteArg::Open => Some(vec![Category::Open]),
            SuiteArg::Sparse => Some(vec![Category::Sparse]),
            SuiteArg::Cluttered => Some(vec![Category::Cluttered]),
            SuiteArg::Trap => Some(vec![Category::Trap]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Expert,
    Random,
    Oracle,
    Dt,
    Reinforce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SeedPolicy {
    Expert,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Write every suite scene as JSON plus a CSV of start-pose pools.
    GenScenes {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Roll out a scripted policy and store relabeled trajectories as JSON lines.
    CollectExpert {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to training.stages.offline.n_expert_trajectories.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value = "expert")]
        policy: SeedPolicy,
    },
    /// Stage 1: supervised training on a trajectory file.
    TrainOffline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage 2: online fine-tuning starting from a checkpoint and a buffer file.
    TrainOnline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the Markovian REINFORCE baseline.
    TrainReinforce {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a policy on the fixed suite starts.
    Eval {
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        /// Channel mask: wo_both, wo_depth, wo_rgb or depth_rgb.
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train and evaluate DT-Online-Expert under every channel mask.
    Ablate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
    },
    /// Optimal finite-horizon value of every suite start.
    Oracle {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
    },
    /// Print a step-by-step trace of one episode.
    Replay {
        #[arg(long)]
        category: Category,
        #[arg(long)]
        scene_seed: u64,
        /// Start pose as x,y,heading; defaults to the scene's canonical start.
        #[arg(long)]
        start: Option<String>,
        #[arg(long, value_enum, default_value = "expert")]
        policy: PolicyArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: WorkbenchConfig,
    seed: u64,
}

impl Ctx {
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn suite(&self, which: SuiteArg, mask: ChannelMask) -> Result<Suite> {
        let mut spec = self.cfg.eval.suite.clone();
        if let Some(cats) = which.categories() {
            spec.categories = cats;
        }
        Ok(Suite::build(
            &spec,
            &self.cfg.gen_params(),
            &self.cfg.scenes.rules,
            self.cfg.sensors,
            mask,
        )?)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => WorkbenchConfig::load(p)?,
        None => WorkbenchConfig::default(),
    };
    let seed = cfg.resolve_seed(cli.seed)?;
    let ctx = Ctx { cfg, seed };
    match cli.command {
        Command::GenScenes { out_dir } => gen_scenes(&ctx, &out_dir),
        Command::CollectExpert { out, count, policy } => collect(&ctx, &out, count, policy),
        Command::TrainOffline { data, checkpoint, log } => train_offline(&ctx, &data, &checkpoint, log.as_deref()),
        Command::TrainOnline {
            checkpoint,
            data,
            out,
            log,
        } => train_online(&ctx, &checkpoint, &data, &out, log.as_deref()),
        Command::TrainReinforce { out, log } => train_reinforce(&ctx, &out, log.as_deref()),
        Command::Eval {
            policy,
            checkpoint,
            suite,
            mask,
            results,
            summary,
        } => eval(&ctx, policy, checkpoint.as_deref(), suite, mask.as_deref(), results.as_deref(), summary.as_deref()),
        Command::Ablate { out_dir, suite } => ablate(&ctx, &out_dir, suite),
        Command::Oracle { out, suite } => oracle(&ctx, &out, suite),
        Command::Replay {
            category,
            scene_seed,
            start,
            policy,
            checkpoint,
        } => replay(&ctx, category, scene_seed, start.as_deref(), policy, checkpoint.as_deref()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_trajectories(path: &Path) -> Result<Vec<activedt_core::trajectory::Trajectory>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_dt(path: &Path) -> Result<DecisionTransformer> {
    Ok(Checkpoint::load(path)?.into_dt()?)
}

fn gen_scenes(ctx: &Ctx, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let suite = ctx.suite(SuiteArg::All, ctx.cfg.eval.mask)?;
    let mut pools = String::from("scene_id,x,y,heading\n");
    for (scene, pool) in suite.sim.scenes.iter().zip(&suite.sim.pools) {
        write_file(&out_dir.join(format!("{}.json", scene.id())), &scene.to_json()?)?;
        for p in pool {
            pools.push_str(&format!("{},{},{},{}\n", scene.id(), p.x, p.y, p.heading));
        }
    }
    write_file(&out_dir.join("pools.csv"), &pools)?;
    eprintln!("wrote {} scenes to {}", suite.sim.scenes.len(), out_dir.display());
    Ok(())
}

fn collect(ctx: &Ctx, out: &Path, count: Option<usize>, policy: SeedPolicy) -> Result<()> {
    let suite = ctx.suite(SuiteArg::All, ctx.cfg.eval.mask)?;
    let count = count.unwrap_or(ctx.cfg.training.stages.offline.n_expert_trajectories);
    let agent = match policy {
        SeedPolicy::Expert => Agent::Expert,
        SeedPolicy::Random => Agent::Random,
    };
    let trajs = collect_trajectories(&suite.sim, agent, count, &mut ctx.rng())?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_jsonl(&mut w, &trajs)?;
    w.flush()?;
    eprintln!("wrote {} trajectories to {}", trajs.len(), out.display());
    Ok(())
}

fn train_offline(ctx: &Ctx, data: &Path, checkpoint: &Path, log: Option<&Path>) -> Result<()> {
    let stages = &ctx.cfg.training.stages;
    let trajs = load_trajectories(data)?;
    let mut buffer = ReplayBuffer::new(stages.buffer_capacity.max(trajs.len()));
    buffer.extend(trajs);
    let mut model = DecisionTransformer::new(ctx.cfg.dt_config(), stages.seed)?;
    let training_log = offline_stage(&mut model, &buffer, &stages.offline, &mut ctx.rng())?;
    Checkpoint::from_dt(&model).save(checkpoint)?;
    if let Some(p) = log {
        write_file(p, &training_log.to_csv())?;
    }
    Ok(())
}

fn train_online(ctx: &Ctx, checkpoint: &Path, data: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let stages = &ctx.cfg.training.stages;
    let mut model = load_dt(checkpoint)?;
    let suite = ctx.suite(SuiteArg::All, ctx.cfg.eval.mask)?;
    if model.config.obs_dim != suite.sim.obs_dim() {
        bail!(
            "checkpoint expects {} observation values, the sensors produce {}",
            model.config.obs_dim,
            suite.sim.obs_dim()
        );
    }
    let mut buffer = ReplayBuffer::new(stages.buffer_capacity);
    buffer.extend(load_trajectories(data)?);
    let training_log = online_stage(&mut model, &mut buffer, &suite.sim, &stages.online, &suite.starts, &mut ctx.rng())?;
    Checkpoint::from_dt(&model).save(out)?;
    if let Some(p) = log {
        write_file(p, &training_log.to_csv())?;
    }
    Ok(())
}

fn train_reinforce(ctx: &Ctx, out: &Path, log: Option<&Path>) -> Result<()> {
    let suite = ctx.suite(SuiteArg::All, ctx.cfg.eval.mask)?;
    let (policy, training_log) = reinforce_baseline(&suite.sim, &ctx.cfg.training.reinforce, &suite.starts, &mut ctx.rng())?;
    Checkpoint::from_mlp(&policy).save(out)?;
    if let Some(p) = log {
        write_file(p, &training_log.to_csv())?;
    }
    Ok(())
}

enum Loaded {
    None,
    Dt(DecisionTransformer),
    Mlp(MlpPolicy),
}

fn load_policy(policy: PolicyArg, checkpoint: Option<&Path>) -> Result<Loaded> {
    let needs = matches!(policy, PolicyArg::Dt | PolicyArg::Reinforce);
    match (needs, checkpoint) {
        (false, _) => Ok(Loaded::None),
        (true, None) => bail!("--checkpoint is required for --policy {policy:?}"),
        (true, Some(p)) => {
            let ck = Checkpoint::load(p)?;
            Ok(match policy {
                PolicyArg::Dt => Loaded::Dt(ck.into_dt()?),
                _ => Loaded::Mlp(ck.into_mlp()?),
            })
        }
    }
}

fn agent_for<'a>(policy: PolicyArg, loaded: &'a Loaded, horizon: usize) -> Option<Agent<'a>> {
    match (policy, loaded) {
        (PolicyArg::Expert, _) => Some(Agent::Expert),
        (PolicyArg::Random, _) => Some(Agent::Random),
        (PolicyArg::Dt, Loaded::Dt(model)) => Some(Agent::Dt {
            model,
            mode: ActMode::Greedy,
            initial_rtg: horizon as f64,
        }),
        (PolicyArg::Reinforce, Loaded::Mlp(model)) => Some(Agent::Mlp { model, greedy: true }),
        _ => None,
    }
}

fn policy_name(policy: PolicyArg) -> &'static str {
    match policy {
        PolicyArg::Expert => "expert",
        PolicyArg::Random => "random",
        PolicyArg::Oracle => "oracle",
        PolicyArg::Dt => "dt",
        PolicyArg::Reinforce => "reinforce",
    }
}

fn run_policy(suite: &Suite, policy: PolicyArg, loaded: &Loaded, seed: u64) -> Result<Vec<EpisodeResult>> {
    if policy == PolicyArg::Oracle {
        return Ok(suite.evaluate_oracle(&suite.starts)?);
    }
    let agent = agent_for(policy, loaded, suite.sim.horizon).context("policy and checkpoint kind disagree")?;
    Ok(suite.evaluate(agent, policy_name(policy), &mut ChaCha8Rng::seed_from_u64(seed))?)
}

fn write_summary(results: &[EpisodeResult], suite: &Suite, path: Option<&Path>) -> Result<MetricsSummary> {
    let oracle = suite.oracle_values(&suite.starts);
    let summary = summarize(results, Some(&oracle), suite.sim.horizon)?;
    match path {
        Some(p) => write_file(p, &summary.to_json()?)?,
        None => print!("{}", summary.to_csv()),
    }
    Ok(summary)
}

fn eval(
    ctx: &Ctx,
    policy: PolicyArg,
    checkpoint: Option<&Path>,
    which: SuiteArg,
    mask: Option<&str>,
    results: Option<&Path>,
    summary: Option<&Path>,
) -> Result<()> {
    let mask = match mask {
        Some(m) => ChannelMask::parse(m)?,
        None => ctx.cfg.eval.mask,
    };
    let loaded = load_policy(policy, checkpoint)?;
    if let Loaded::Dt(model) = &loaded {
        if model.config.obs_dim != ctx.cfg.sensors.obs_dim() {
            bail!("checkpoint observation size does not match the sensor configuration");
        }
    }
    let suite = ctx.suite(which, mask)?;
    let res = run_policy(&suite, policy, &loaded, ctx.seed)?;
    if let Some(p) = results {
        write_file(p, &results_csv(&res))?;
    }
    write_summary(&res, &suite, summary)?;
    Ok(())
}

fn ablate(ctx: &Ctx, out_dir: &Path, which: SuiteArg) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let base = ctx.suite(which, ChannelMask::FULL)?;
    let oracle = base.oracle_values(&base.starts);
    let mut table = String::from("mask,mean,std,failure_rate\n");
    for mask in ChannelMask::ABLATIONS {
        let suite = base.with_mask(mask);
        let mut rng = ctx.rng();
        let run = run_two_stage(
            &suite.sim,
            ctx.cfg.dt_config(),
            &ctx.cfg.training.stages,
            Agent::Expert,
            &suite.starts,
            &mut rng,
        )?;
        let agent = Agent::Dt {
            model: &run.online,
            mode: ActMode::Greedy,
            initial_rtg: suite.sim.horizon as f64,
        };
        let res = suite.evaluate(agent, mask.label(), &mut rng)?;
        let summary = summarize(&res, Some(&oracle), suite.sim.horizon)?;
        write_file(&out_dir.join(format!("summary_{}.json", mask.label())), &summary.to_json()?)?;
        let g = summary.group(mask.label(), "all").context("pooled row")?;
        table.push_str(&format!("{},{:.6},{:.6},{:.6}\n", mask.label(), g.mean, g.std, g.failure_rate));
    }
    write_file(&out_dir.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn oracle(ctx: &Ctx, out: &Path, which: SuiteArg) -> Result<()> {
    let suite = ctx.suite(which, ctx.cfg.eval.mask)?;
    let values = suite.oracle_values(&suite.starts);
    let mut text = String::from("scene_id,x,y,heading,oracle_value\n");
    for (&(s, p), v) in suite.starts.iter().zip(&values) {
        text.push_str(&format!("{},{},{},{},{:.6}\n", suite.sim.scenes[s].id(), p.x, p.y, p.heading, v));
    }
    write_file(out, &text)
}

fn parse_pose(s: &str) -> Result<Pose> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("--start expects x,y,heading, got `{s}`");
    }
    let x = parts[0].parse().with_context(|| format!("bad x in `{s}`"))?;
    let y = parts[1].parse().with_context(|| format!("bad y in `{s}`"))?;
    let h = parts[2].parse().with_context(|| format!("bad heading in `{s}`"))?;
    Ok(Pose::new(x, y, h))
}

fn replay(
    ctx: &Ctx,
    category: Category,
    scene_seed: u64,
    start: Option<&str>,
    policy: PolicyArg,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let scene = generate_scene(category, scene_seed, &ctx.cfg.gen_params())?;
    let start = match start {
        Some(s) => parse_pose(s)?,
        None => scene.canonical_start().context("scene has no rule-passing start")?,
    };
    let suite = Suite::from_scenes(
        vec![scene],
        0,
        ctx.cfg.eval.suite.horizon,
        &ctx.cfg.scenes.rules,
        ctx.cfg.sensors,
        ctx.cfg.eval.mask,
    )?;
    let loaded = load_policy(policy, checkpoint)?;
    let scene = &suite.sim.scenes[0];
    let rec = if policy == PolicyArg::Oracle {
        let plan = ValueTable::build(scene, suite.sim.horizon).plan(scene, &start)?;
        suite.sim.run(0, start, |v| Ok(plan.actions[v.t]))?
    } else {
        let agent = agent_for(policy, &loaded, suite.sim.horizon).context("policy and checkpoint kind disagree")?;
        rollout(&suite.sim, 0, start, agent, &mut ctx.rng())?
    };
    let rtg = compute_rtg(&rec.rewards);
    let mut out = String::new();
    out.push_str(&format!(
        "scene {}  object ({:.2}, {:.2})  policy {}\n",
        scene.id(),
        scene.object.center.x,
        scene.object.center.y,
        policy_name(policy)
    ));
    out.push_str(&format!(
        "start ({}, {}) heading {} deg  score {:.3}\n",
        start.x,
        start.y,
        start.heading as u32 * 30,
        detect(&start, scene).score
    ));
    out.push_str(" t   x   y  heading  action   reward  rtg\n");
    for (t, a) in rec.actions.iter().enumerate() {
        let p = rec.poses[t + 1];
        out.push_str(&format!(
            "{:>2}  {:>2}  {:>2}  {:>7}  {:<7}  {:.3}   {:.3}\n",
            t,
            p.x,
            p.y,
            p.heading as u32 * 30,
            a.name(),
            rec.rewards[t],
            rtg[t]
        ));
    }
    out.push_str(&format!("total reward {:.3}\n", rec.total_reward()));
    print!("{out}");
    Ok(())
}
