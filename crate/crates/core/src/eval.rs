//! Benchmark suites, per-episode results and aggregated metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{ChannelMask, SensorConfig};
use crate::env::{Action, Pose};
use crate::episode::{replay_actions, EpisodeRecord};
use crate::error::{CoreError, Result};
use crate::policies::ValueTable;
use crate::scenario::{generate_scene, Category, GenParams, PoseRules, Scene};
use crate::sim::Simulator;
use crate::training::{rollout, Agent};

/// Episodes with a total reward below this count as failures.
pub const FAILURE_THRESHOLD: f64 = 0.2;
/// Score at which a view counts as a confident detection.
pub const DETECTION_THRESHOLD: f64 = 0.8;
/// Bumped whenever a CSV or JSON layout changes.
pub const OUTPUT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub categories: Vec<Category>,
    pub scenes_per_category: usize,
    pub starts_per_scene: usize,
    pub first_seed: u64,
    pub horizon: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            categories: Category::ALL.to_vec(),
            scenes_per_category: 25,
            starts_per_scene: 16,
            first_seed: 0,
            horizon: 10,
        }
    }
}

impl SuiteSpec {
    pub fn for_categories(categories: &[Category]) -> Self {
        Self {
            categories: categories.to_vec(),
            ..Self::default()
        }
    }
}

/// Scenes, start pools and the fixed evaluation starts of a benchmark.
#[derive(Debug)]
pub struct Suite {
    pub sim: Simulator,
    pub starts: Vec<(usize, Pose)>,
}

impl Suite {
    pub fn build(
        spec: &SuiteSpec,
        gen: &GenParams,
        rules: &PoseRules,
        sensors: SensorConfig,
        mask: ChannelMask,
    ) -> Result<Self> {
        if spec.categories.is_empty() || spec.scenes_per_category == 0 {
            return Err(CoreError::Config("suite needs at least one scene".into()));
        }
        let mut scenes = Vec::new();
        for &cat in &spec.categories {
            for k in 0..spec.scenes_per_category as u64 {
                scenes.push(generate_scene(cat, spec.first_seed + k, gen)?);
            }
        }
        Self::from_scenes(scenes, spec.starts_per_scene, spec.horizon, rules, sensors, mask)
    }

    /// Evaluation starts are drawn without replacement from each pool with a
    /// stream seeded by the scene seed, so they do not depend on the suite.
    pub fn from_scenes(
        scenes: Vec<Scene>,
        starts_per_scene: usize,
        horizon: usize,
        rules: &PoseRules,
        sensors: SensorConfig,
        mask: ChannelMask,
    ) -> Result<Self> {
        let sim = Simulator::new(scenes, rules, sensors, mask, horizon)?;
        let mut starts = Vec::new();
        for (i, scene) in sim.scenes.iter().enumerate() {
            let pool = &sim.pools[i];
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
            for k in sample(&mut rng, pool.len(), starts_per_scene.min(pool.len())).iter() {
                starts.push((i, pool[k]));
            }
        }
        Ok(Self { sim, starts })
    }

    /// Same scenes and starts observed through another channel mask.
    pub fn with_mask(&self, mask: ChannelMask) -> Self {
        Self {
            sim: self.sim.with_mask(mask),
            starts: self.starts.clone(),
        }
    }

    /// Starts restricted to the given categories.
    pub fn starts_in(&self, categories: &[Category]) -> Vec<(usize, Pose)> {
        self.starts
            .iter()
            .filter(|(s, _)| categories.contains(&self.sim.scenes[*s].category))
            .copied()
            .collect()
    }

    /// Optimal value of every start, in order.
    pub fn oracle_values(&self, starts: &[(usize, Pose)]) -> Vec<f64> {
        let mut tables: BTreeMap<usize, ValueTable> = BTreeMap::new();
        starts
            .iter()
            .map(|&(s, p)| {
                let scene = &self.sim.scenes[s];
                let vt = tables
                    .entry(s)
                    .or_insert_with(|| ValueTable::build(scene, self.sim.horizon));
                vt.value(scene, &p)
            })
            .collect()
    }

    /// Executes the optimal plan from every start.
    pub fn evaluate_oracle(&self, starts: &[(usize, Pose)]) -> Result<Vec<EpisodeResult>> {
        let mut tables: BTreeMap<usize, ValueTable> = BTreeMap::new();
        starts
            .iter()
            .map(|&(s, p)| {
                let scene = &self.sim.scenes[s];
                let vt = tables
                    .entry(s)
                    .or_insert_with(|| ValueTable::build(scene, self.sim.horizon));
                let plan = vt.plan(scene, &p)?;
                let rec = self.sim.run(s, p, |v| Ok(plan.actions[v.t]))?;
                Ok(EpisodeResult::from_record(scene, "oracle", &rec))
            })
            .collect()
    }

    pub fn evaluate<R: Rng>(&self, agent: Agent<'_>, policy: &str, rng: &mut R) -> Result<Vec<EpisodeResult>> {
        self.evaluate_starts(&self.starts, agent, policy, rng)
    }

    pub fn evaluate_starts<R: Rng>(
        &self,
        starts: &[(usize, Pose)],
        agent: Agent<'_>,
        policy: &str,
        rng: &mut R,
    ) -> Result<Vec<EpisodeResult>> {
        starts
            .iter()
            .map(|&(s, p)| {
                let rec = rollout(&self.sim, s, p, agent, rng)?;
                Ok(EpisodeResult::from_record(&self.sim.scenes[s], policy, &rec))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scene_id: String,
    pub category: Category,
    pub start: Pose,
    pub policy: String,
    pub reward: f64,
    pub steps_to_first_detection: Option<usize>,
    pub actions: Vec<Action>,
}

impl EpisodeResult {
    pub fn from_record(scene: &Scene, policy: &str, rec: &EpisodeRecord) -> Self {
        Self {
            scene_id: scene.id(),
            category: scene.category,
            start: rec.init_pose,
            policy: policy.to_string(),
            reward: rec.total_reward(),
            steps_to_first_detection: rec.rewards.iter().position(|&r| r >= DETECTION_THRESHOLD).map(|t| t + 1),
            actions: rec.actions.clone(),
        }
    }

    /// Whether re-simulating the action sequence gives exactly the stored reward.
    pub fn replays_exactly(&self, scene: &Scene) -> Result<bool> {
        let rewards = replay_actions(scene, self.start, &self.actions)?;
        Ok(rewards.iter().sum::<f64>() == self.reward)
    }
}

pub fn results_csv(results: &[EpisodeResult]) -> String {
    let mut out = String::from("scene_id,category,x,y,heading,policy,reward,steps_to_first_detection_nonpaper,actions\n");
    for r in results {
        let actions: Vec<&str> = r.actions.iter().map(|a| a.name()).collect();
        let first = r.steps_to_first_detection.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{},{}",
            r.scene_id,
            r.category,
            r.start.x,
            r.start.y,
            r.start.heading,
            r.policy,
            r.reward,
            first,
            actions.join(" ")
        )
        .expect("write to string");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub policy: String,
    /// A category name, or `all` for the pooled row of a policy.
    pub category: String,
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub failure_rate: f64,
    pub histogram: Vec<usize>,
    pub oracle_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub version: u32,
    pub horizon: usize,
    pub groups: Vec<GroupMetrics>,
}

impl MetricsSummary {
    pub fn group(&self, policy: &str, category: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.policy == policy && g.category == category)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,category,episodes,mean,std,failure_rate,oracle_ratio");
        for b in 0..=self.horizon {
            write!(out, ",bin_{b}").expect("write to string");
        }
        out.push('\n');
        for g in &self.groups {
            let ratio = g.oracle_ratio.map(|r| format!("{r:.6}")).unwrap_or_default();
            write!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{}",
                g.policy, g.category, g.episodes, g.mean, g.std, g.failure_rate, ratio
            )
            .expect("write to string");
            for c in &g.histogram {
                write!(out, ",{c}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

fn group_metrics(policy: &str, category: &str, rewards: &[f64], oracle: Option<&[f64]>, horizon: usize) -> GroupMetrics {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let mut histogram = vec![0; horizon + 1];
    for &r in rewards {
        let bin = (r.max(0.0).floor() as usize).min(horizon);
        histogram[bin] += 1;
    }
    let oracle_ratio = oracle.and_then(|o| {
        let m = o.iter().sum::<f64>() / o.len() as f64;
        (m > 0.0).then(|| mean / m)
    });
    GroupMetrics {
        policy: policy.to_string(),
        category: category.to_string(),
        episodes: rewards.len(),
        mean,
        std: var.sqrt(),
        failure_rate: rewards.iter().filter(|&&r| r < FAILURE_THRESHOLD).count() as f64 / n,
        histogram,
        oracle_ratio,
    }
}

/// Aggregates per (policy, category) plus one pooled row per policy.
/// `oracle`, when given, holds the optimal value of each result's start.
pub fn summarize(results: &[EpisodeResult], oracle: Option<&[f64]>, horizon: usize) -> Result<MetricsSummary> {
    if results.is_empty() {
        return Err(CoreError::EmptyResults);
    }
    if let Some(o) = oracle {
        if o.len() != results.len() {
            return Err(CoreError::Config(format!(
                "{} oracle values for {} results",
                o.len(),
                results.len()
            )));
        }
    }
    let mut keyed: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (i, r) in results.iter().enumerate() {
        for cat in [r.category.to_string(), "all".to_string()] {
            let e = keyed.entry((r.policy.clone(), cat)).or_default();
            e.0.push(r.reward);
            if let Some(o) = oracle {
                e.1.push(o[i]);
            }
        }
    }
    let groups = keyed
        .iter()
        .map(|((policy, cat), (rewards, values))| {
            group_metrics(policy, cat, rewards, oracle.map(|_| values.as_slice()), horizon)
        })
        .collect();
    Ok(MetricsSummary {
        version: OUTPUT_VERSION,
        horizon,
        groups,
    })
}
