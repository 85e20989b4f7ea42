use activedt_core::buffer::ReplayBuffer;
use activedt_core::detection::{quantize_score, ChannelMask, SensorConfig};
use activedt_core::dt::{ActMode, DTConfig, DecisionTransformer, RTGSchedule};
use activedt_core::env::{Action, Pose};
use activedt_core::eval::{Suite, SuiteSpec};
use activedt_core::reinforce::{reinforce_baseline, MlpPolicy, ReinforceConfig};
use activedt_core::scenario::{generate_scene, Category, GenParams, PoseRules};
use activedt_core::sim::Simulator;
use activedt_core::trajectory::{compute_rtg, hindsight_relabel, Trajectory};
use activedt_core::training::{
    collect_trajectories, evaluate_mean, offline_stage, online_stage, run_two_stage, Agent, OfflineConfig,
    OnlineConfig, StageConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_sim() -> Simulator {
    let params = GenParams {
        width: 14,
        height: 14,
        ..GenParams::default()
    };
    let scenes = [Category::Open, Category::Sparse]
        .iter()
        .flat_map(|&c| (0..2).map(move |s| (c, s)))
        .map(|(c, s)| generate_scene(c, s, &params).unwrap())
        .collect();
    Simulator::new(scenes, &PoseRules::default(), SensorConfig::default(), ChannelMask::FULL, 6).unwrap()
}

fn tiny_dt(sim: &Simulator) -> DecisionTransformer {
    let cfg = DTConfig {
        embed_dim: 8,
        n_layers: 1,
        n_heads: 1,
        ..DTConfig::new(sim.obs_dim(), sim.horizon)
    };
    DecisionTransformer::new(cfg, 0).unwrap()
}

fn fast_online(rounds: usize) -> OnlineConfig {
    OnlineConfig {
        rounds,
        episodes_per_round: 3,
        train_steps_per_round: 2,
        batch_size: 4,
        lr: 1e-3,
        eval_every: 2,
        ..OnlineConfig::default()
    }
}

fn traj_with_rewards(rewards: &[f64]) -> Trajectory {
    let mut t = Trajectory {
        scene_ref: "open-0".into(),
        init_pose: Pose::new(1, 1, 0),
        steps: rewards
            .iter()
            .map(|&reward| activedt_core::trajectory::Step {
                obs: vec![0.0; 3],
                action: Action::Stop,
                reward,
                rtg: 0.0,
            })
            .collect(),
        rtg_0: 0.0,
    };
    t.relabel();
    t
}

proptest! {
    #[test]
    fn rtg_differences_recover_rewards(raw in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let rewards: Vec<f64> = raw.iter().map(|&r| quantize_score(r)).collect();
        let rtg = compute_rtg(&rewards);
        for t in 0..rewards.len() {
            let next = rtg.get(t + 1).copied().unwrap_or(0.0);
            prop_assert_eq!(rtg[t] - next, rewards[t]);
        }
        prop_assert!(traj_with_rewards(&rewards).rtg_consistent());
    }

    #[test]
    fn schedules_track_consumed_reward(raw in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let horizon = raw.len() as f64;
        let mut sched = RTGSchedule::new(horizon);
        let mut consumed = 0.0;
        for r in raw.iter().map(|&r| quantize_score(r)) {
            sched.consume(r);
            consumed += r;
            prop_assert_eq!(sched.remaining, horizon - consumed);
        }
    }

    #[test]
    fn buffer_keeps_the_newest_entries(cap in 1usize..12, n in 0usize..40) {
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..n {
            buf.push(traj_with_rewards(&[i as f64 / 64.0, 0.0]));
        }
        prop_assert_eq!(buf.len(), n.min(cap));
        let first = n.saturating_sub(cap);
        for (k, t) in buf.iter().enumerate() {
            prop_assert_eq!(t.steps[0].reward, (first + k) as f64 / 64.0);
        }
        let probs = buf.probabilities();
        if !probs.is_empty() {
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn sampler_frequencies_follow_reward_variance() {
    let mut buf = ReplayBuffer::new(4);
    buf.push(traj_with_rewards(&[0.5, 0.5]));
    buf.push(traj_with_rewards(&[0.0, 0.5]));
    buf.push(traj_with_rewards(&[0.0, 1.0]));
    let n = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 3];
    for i in buf.sample_indices(n, &mut rng).unwrap() {
        counts[i] += 1;
    }
    assert_eq!(counts[0], 0);
    let expected = [0.0, 0.2 * n as f64, 0.8 * n as f64];
    let stat: f64 = (1..3).map(|i| (counts[i] as f64 - expected[i]).powi(2) / expected[i]).sum();
    let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(stat);
    assert!(p > 0.01, "counts {counts:?}, p = {p:.4}");
}

#[test]
fn relabeled_trajectories_are_consistent() {
    let sim = small_sim();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in collect_trajectories(&sim, Agent::Random, 30, &mut rng).unwrap() {
        assert!(t.rtg_consistent());
        assert_eq!(t.len(), sim.horizon);
        let mut stale = t.clone();
        for s in &mut stale.steps {
            s.rtg += 1.0;
        }
        assert_eq!(hindsight_relabel(&stale), t);
    }
}

#[test]
fn online_buffer_grows_by_episodes_per_round_until_full() {
    let sim = small_sim();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let initial = collect_trajectories(&sim, Agent::Expert, 5, &mut rng).unwrap();
    let mut buf = ReplayBuffer::new(12);
    buf.extend(initial);
    let mut model = tiny_dt(&sim);
    let log = online_stage(&mut model, &mut buf, &sim, &fast_online(4), &[], &mut rng).unwrap();
    let lens: Vec<usize> = log.rounds.iter().map(|r| r.buffer_len).collect();
    assert_eq!(lens, vec![8, 11, 12, 12]);
    assert!(buf.iter().all(|t| t.rtg_consistent()));
}

#[test]
fn zero_rounds_leave_the_offline_model_untouched() {
    let sim = small_sim();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut buf = ReplayBuffer::new(10);
    buf.extend(collect_trajectories(&sim, Agent::Expert, 10, &mut rng).unwrap());
    let mut model = tiny_dt(&sim);
    offline_stage(&mut model, &buf, &OfflineConfig { epochs: 1, batch_size: 4, lr: 1e-3, ..OfflineConfig::default() }, &mut rng).unwrap();
    let before = model.clone();
    let steps = sim.env_steps();
    let log = online_stage(&mut model, &mut buf, &sim, &fast_online(0), &[], &mut rng).unwrap();
    assert!(log.rounds.is_empty());
    assert_eq!(model.params, before.params);
    assert_eq!(sim.env_steps(), steps);
}

#[test]
fn only_collection_and_online_rounds_touch_the_simulator() {
    let sim = small_sim();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trajs = collect_trajectories(&sim, Agent::Expert, 7, &mut rng).unwrap();
    assert_eq!(sim.env_steps(), 7 * sim.horizon as u64);
    let mut buf = ReplayBuffer::new(20);
    buf.extend(trajs);
    let mut model = tiny_dt(&sim);
    offline_stage(&mut model, &buf, &OfflineConfig { epochs: 3, batch_size: 4, lr: 1e-3, ..OfflineConfig::default() }, &mut rng).unwrap();
    assert_eq!(sim.env_steps(), 7 * sim.horizon as u64);
    online_stage(&mut model, &mut buf, &sim, &fast_online(2), &[], &mut rng).unwrap();
    assert_eq!(sim.env_steps(), (7 + 2 * 3) * sim.horizon as u64);
}

#[test]
fn two_stage_runs_are_reproducible() {
    let sim = small_sim();
    let starts: Vec<(usize, Pose)> = (0..4).map(|i| (i, sim.pools[i][0])).collect();
    let cfg = StageConfig {
        offline: OfflineConfig {
            n_expert_trajectories: 8,
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            ..OfflineConfig::default()
        },
        online: fast_online(2),
        buffer_capacity: 10,
        seed: 4,
    };
    let dt_cfg = tiny_dt(&sim).config;
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        run_two_stage(&sim, dt_cfg, &cfg, Agent::Expert, &starts, &mut rng).unwrap()
    };
    let (a, b) = (run(9), run(9));
    assert_eq!(a.online.params, b.online.params);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_ne!(a.offline.params, a.online.params);
}

#[test]
fn zero_advantage_gives_zero_gradient() {
    let policy = MlpPolicy::new(5, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let actions: Vec<usize> = (0..6).map(|i| i % 7).collect();
    let (_, grads) = policy.weighted_loss_and_grads(&obs, &actions, &[0.0; 6]).unwrap();
    assert!(grads.values().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn reinforce_beats_random_on_open_scenes() {
    let suite = Suite::build(
        &SuiteSpec {
            scenes_per_category: 5,
            starts_per_scene: 8,
            ..SuiteSpec::for_categories(&[Category::Open])
        },
        &GenParams::default(),
        &PoseRules::default(),
        SensorConfig::default(),
        ChannelMask::FULL,
    )
    .unwrap();
    let cfg = ReinforceConfig {
        iterations: 150,
        episodes_per_iteration: 16,
        lr: 3e-3,
        ..ReinforceConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (policy, _) = reinforce_baseline(&suite.sim, &cfg, &[], &mut rng).unwrap();
    let trained = evaluate_mean(&suite.sim, Agent::Mlp { model: &policy, greedy: true }, &suite.starts, &mut rng).unwrap();
    let random = evaluate_mean(&suite.sim, Agent::Random, &suite.starts, &mut rng).unwrap();
    assert!(trained > random, "reinforce {trained:.3} vs random {random:.3}");
}

#[test]
fn recorded_episodes_replay_exactly() {
    let sim = small_sim();
    let model = tiny_dt(&sim);
    let suite = Suite::from_scenes(sim.scenes.clone(), 3, 6, &PoseRules::default(), SensorConfig::default(), ChannelMask::FULL).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let agents = [
        Agent::Expert,
        Agent::Random,
        Agent::Dt { model: &model, mode: ActMode::Sample { temperature: 1.0 }, initial_rtg: 6.0 },
    ];
    for agent in agents {
        for r in suite.evaluate(agent, agent.name(), &mut rng).unwrap() {
            let scene = suite.sim.scenes.iter().find(|s| s.id() == r.scene_id).unwrap();
            assert!(r.replays_exactly(scene).unwrap());
        }
    }
}
