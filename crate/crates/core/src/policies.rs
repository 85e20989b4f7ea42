//! Non-learned policies: the scripted expert, the uniform random baseline,
//! and an exact finite-horizon planner used as a verification oracle.

use rand::Rng;

use crate::detection::{bearing_deg, detect};
use crate::env::{transition, Action, Pose, N_ACTIONS};
use crate::error::Result;
use crate::scenario::Scene;

/// Half a heading increment.
pub const EXPERT_ALIGN_DEG: f64 = 15.0;

/// Comparisons within this margin count as ties, so poses that sit exactly on
/// a decision boundary get the same action regardless of rounding.
const TIE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDecision {
    pub action: Action,
    pub distribution: Option<[f64; N_ACTIONS]>,
}

/// Rotate until the object is near the optical axis, then close distance
/// with grid moves until inside the score plateau, then stop. Obstacles are
/// ignored: a blocked move is still attempted.
pub fn expert_action(pose: &Pose, scene: &Scene) -> Action {
    let origin = scene.grid.pose_center(pose);
    let target = scene.object.center;
    let beta = bearing_deg(pose, origin, target);
    if beta.abs() > EXPERT_ALIGN_DEG + TIE_EPS {
        return if beta > 0.0 { Action::RotateCcw } else { Action::RotateCw };
    }
    let d = origin.distance(&target);
    if d > scene.detector.d_hi + TIE_EPS {
        let c = scene.grid.cell_size();
        let mut best = (Action::MoveNorth, f64::INFINITY);
        for a in [Action::MoveNorth, Action::MoveSouth, Action::MoveWest, Action::MoveEast] {
            let (dx, dy) = a.translation().expect("translation");
            let moved = origin.x + dx as f64 * c;
            let moved_y = origin.y + dy as f64 * c;
            let nd = (target.x - moved).hypot(target.y - moved_y);
            if nd < best.1 - TIE_EPS {
                best = (a, nd);
            }
        }
        return best.0;
    }
    Action::Stop
}

pub fn expert_decision(pose: &Pose, scene: &Scene) -> PolicyDecision {
    let action = expert_action(pose, scene);
    let mut dist = [0.0; N_ACTIONS];
    dist[action.index()] = 1.0;
    PolicyDecision {
        action,
        distribution: Some(dist),
    }
}

pub fn random_action<R: Rng + ?Sized>(rng: &mut R) -> Action {
    Action::ALL[rng.gen_range(0..N_ACTIONS)]
}

pub fn random_decision<R: Rng + ?Sized>(rng: &mut R) -> PolicyDecision {
    PolicyDecision {
        action: random_action(rng),
        distribution: Some([1.0 / N_ACTIONS as f64; N_ACTIONS]),
    }
}

/// Detection score of every pose, indexed by `OccupancyGrid::pose_index`.
pub fn score_table(scene: &Scene) -> Vec<f64> {
    let grid = &scene.grid;
    let mut table = vec![0.0; grid.pose_table_len()];
    for p in grid.all_poses() {
        table[grid.pose_index(&p)] = detect(&p, scene).score;
    }
    table
}

/// Optimal values of the unstopped process for every (t, pose); the stopped
/// process needs no table since its value is `(T − t) · score`.
pub struct ValueTable {
    horizon: usize,
    scores: Vec<f64>,
    values: Vec<Vec<f64>>,
    poses: Vec<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OraclePlan {
    pub value: f64,
    pub actions: Vec<Action>,
}

impl ValueTable {
    pub fn build(scene: &Scene, horizon: usize) -> Self {
        let grid = &scene.grid;
        let scores = score_table(scene);
        let poses = grid.all_poses();
        let n = grid.pose_table_len();
        let mut values = vec![vec![0.0; n]; horizon + 1];
        for t in (0..horizon).rev() {
            let (head, tail) = values.split_at_mut(t + 1);
            let (now, next) = (&mut head[t], &tail[0]);
            for p in &poses {
                let i = grid.pose_index(p);
                now[i] = Self::q_values(grid, &scores, next, p, horizon - t)
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        Self {
            horizon,
            scores,
            values,
            poses,
        }
    }

    /// Action values with `remaining` steps left (including this one).
    fn q_values(
        grid: &crate::env::OccupancyGrid,
        scores: &[f64],
        next_values: &[f64],
        pose: &Pose,
        remaining: usize,
    ) -> [f64; N_ACTIONS] {
        let mut q = [0.0; N_ACTIONS];
        for a in Action::ALL {
            q[a.index()] = if a == Action::Stop {
                remaining as f64 * scores[grid.pose_index(pose)]
            } else {
                let np = transition(pose, a, grid);
                let j = grid.pose_index(&np);
                scores[j] + next_values[j]
            };
        }
        q
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn value(&self, scene: &Scene, start: &Pose) -> f64 {
        self.values[0][scene.grid.pose_index(start)]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn num_poses(&self) -> usize {
        self.poses.len()
    }

    /// One optimal action sequence, ties broken by the lowest action encoding.
    pub fn plan(&self, scene: &Scene, start: &Pose) -> Result<OraclePlan> {
        let grid = &scene.grid;
        grid.check_pose(start)?;
        let mut actions = Vec::with_capacity(self.horizon);
        let mut pose = *start;
        for t in 0..self.horizon {
            let q = Self::q_values(grid, &self.scores, &self.values[t + 1], &pose, self.horizon - t);
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let a = Action::ALL[q.iter().position(|&v| v == best).expect("max exists")];
            actions.push(a);
            if a == Action::Stop {
                actions.resize(self.horizon, Action::Stop);
                break;
            }
            pose = transition(&pose, a, grid);
        }
        Ok(OraclePlan {
            value: self.value(scene, start),
            actions,
        })
    }
}

/// Maximal achievable episode reward from `start` over `horizon` steps and an
/// action sequence attaining it.
pub fn oracle_plan(start: &Pose, scene: &Scene, horizon: usize) -> Result<OraclePlan> {
    ValueTable::build(scene, horizon).plan(scene, start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::DetectorParams;
    use crate::env::{OccupancyGrid, Point};
    use crate::scenario::{Category, ObjectSpec};

    fn scene(center: Point) -> Scene {
        Scene {
            grid: OccupancyGrid::room(20, 20, 0.3).unwrap(),
            object: ObjectSpec { center, radius: 0.15, aspect: 1.0, id: 0 },
            detector: DetectorParams::default(),
            category: Category::Open,
            seed: 0,
        }
    }

    #[test]
    fn expert_rotates_toward_object() {
        // object at +60° bearing, 4 m away
        let a = 60f64.to_radians();
        let s = scene(Point::new(3.15 + 4.0 * a.cos(), 3.15 + 4.0 * a.sin()).clone());
        let s = Scene { grid: OccupancyGrid::room(40, 40, 0.3).unwrap(), ..s };
        assert_eq!(expert_action(&Pose::new(10, 10, 0), &s), Action::RotateCcw);
        assert_eq!(expert_action(&Pose::new(10, 10, 4), &s), Action::RotateCw);
    }

    #[test]
    fn expert_moves_toward_aligned_object() {
        let s = scene(Point::new(0.75 + 4.0, 3.15));
        assert_eq!(expert_action(&Pose::new(2, 10, 0), &s), Action::MoveEast);
    }

    #[test]
    fn expert_stops_inside_plateau() {
        let b = 5f64.to_radians();
        let s = scene(Point::new(3.15 + 1.2 * b.cos(), 3.15 + 1.2 * b.sin()));
        assert_eq!(expert_action(&Pose::new(10, 10, 0), &s), Action::Stop);
    }

    #[test]
    fn random_is_uniform_and_reproducible() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<Action> = (0..50).map(|_| random_action(&mut a)).collect();
        let ys: Vec<Action> = (0..50).map(|_| random_action(&mut b)).collect();
        assert_eq!(xs, ys);
        let d = random_decision(&mut a).distribution.unwrap();
        assert!(d.iter().all(|&p| p == 1.0 / 7.0));
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_stops_on_perfect_view() {
        // object exactly along the 30° heading at 1.5 m: any move lowers the score
        let a = 30f64.to_radians();
        let s = scene(Point::new(3.15 + 1.5 * a.cos(), 3.15 + 1.5 * a.sin()));
        let start = Pose::new(10, 10, 1);
        assert!((detect(&start, &s).score - 1.0).abs() < 1e-12);
        let plan = oracle_plan(&start, &s, 10).unwrap();
        assert!((plan.value - 10.0).abs() < 1e-9);
        assert_eq!(plan.actions, vec![Action::Stop; 10]);
    }

    #[test]
    fn oracle_is_zero_when_nothing_is_visible() {
        // object sealed inside a box of obstacles
        let mut s = scene(Point::new(3.15, 3.15));
        for (x, y) in [(9, 9), (10, 9), (11, 9), (9, 10), (11, 10), (9, 11), (10, 11), (11, 11)] {
            s.grid.set(x, y, crate::env::Cell::Obstacle);
        }
        s.grid.set(10, 10, crate::env::Cell::Obstacle);
        let plan = oracle_plan(&Pose::new(3, 3, 0), &s, 10).unwrap();
        assert_eq!(plan.value, 0.0);
    }
}
