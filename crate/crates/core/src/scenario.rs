//! Procedural scenes in four difficulty categories, initial-pose selection,
//! and the versioned scene file format.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{bbox_area, bearing_deg, detect, DetectorParams};
use crate::env::{ray_blocked, transition, Action, Cell, OccupancyGrid, Point, Pose};
use crate::error::{CoreError, Result};

pub const SCENE_FILE_VERSION: u32 = 1;
const MAX_ATTEMPTS: u64 = 50;
/// Episode length used for generation-time feasibility checks.
pub const DEFAULT_HORIZON: usize = 10;
/// Score a scene must be able to reach somewhere.
pub const FEASIBLE_SCORE: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Open,
    Sparse,
    Cluttered,
    Trap,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Open, Category::Sparse, Category::Cluttered, Category::Trap];

    pub fn name(self) -> &'static str {
        match self {
            Category::Open => "open",
            Category::Sparse => "sparse",
            Category::Cluttered => "cluttered",
            Category::Trap => "trap",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Category::Open => 0x0be1,
            Category::Sparse => 0x5a25,
            Category::Cluttered => 0xc107,
            Category::Trap => 0x72a9,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "open" => Ok(Category::Open),
            "sparse" => Ok(Category::Sparse),
            "cluttered" => Ok(Category::Cluttered),
            "trap" => Ok(Category::Trap),
            other => Err(CoreError::Usage(format!("unknown scene category `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub center: Point,
    pub radius: f64,
    pub aspect: f64,
    pub id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub grid: OccupancyGrid,
    pub object: ObjectSpec,
    pub detector: DetectorParams,
    pub category: Category,
    pub seed: u64,
}

impl Scene {
    /// Stable identifier used in trajectory and result files.
    pub fn id(&self) -> String {
        format!("{}-{}", self.category, self.seed)
    }

    /// Whether the object disc overlaps only free cells.
    pub fn object_clear(&self) -> bool {
        let c = self.grid.cell_size();
        let o = &self.object;
        let (x0, x1) = (((o.center.x - o.radius) / c).floor() as i64, ((o.center.x + o.radius) / c).floor() as i64);
        let (y0, y1) = (((o.center.y - o.radius) / c).floor() as i64, ((o.center.y + o.radius) / c).floor() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.grid.cell(x, y) == Cell::Obstacle {
                    // only cells the disc actually reaches
                    let nx = o.center.x.clamp(x as f64 * c, (x + 1) as f64 * c);
                    let ny = o.center.y.clamp(y as f64 * c, (y + 1) as f64 * c);
                    if (nx - o.center.x).hypot(ny - o.center.y) <= o.radius {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn max_score(&self) -> f64 {
        self.grid
            .all_poses()
            .iter()
            .map(|p| detect(p, self).score)
            .fold(0.0, f64::max)
    }

    /// Checks the scene invariants (object on free space, a good view exists).
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if !self.object_clear() {
            return Err(CoreError::Feasibility(format!("{}: object overlaps an obstacle", self.id())));
        }
        if self.max_score() < FEASIBLE_SCORE {
            return Err(CoreError::Feasibility(format!(
                "{}: no pose reaches score {FEASIBLE_SCORE}",
                self.id()
            )));
        }
        Ok(())
    }

    /// Designated start used for single-episode diagnostics: the nearest
    /// rule-passing pose facing the object, preferring poses whose line of
    /// sight is blocked (for trap scenes, the pose behind the barrier).
    pub fn canonical_start(&self) -> Option<Pose> {
        let pool = select_initial_poses(self, &PoseRules::default()).ok()?;
        let target = self.object.center;
        pool.into_iter().min_by_key(|p| {
            let c = self.grid.pose_center(p);
            let beta = bearing_deg(p, c, target).abs();
            let clear = !ray_blocked(c, target, &self.grid);
            (clear, (beta * 1e6) as i64, (c.distance(&target) * 1e6) as i64, *p)
        })
    }
}

/// Rules a start pose must satisfy: poor initial view, far from the object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseRules {
    pub max_score: f64,
    pub min_bbox_area: f64,
    pub min_distance: f64,
}

impl Default for PoseRules {
    fn default() -> Self {
        Self {
            max_score: 0.2,
            min_bbox_area: 200.0,
            min_distance: 3.0,
        }
    }
}

impl PoseRules {
    pub fn accepts(&self, pose: &Pose, scene: &Scene) -> bool {
        let det = detect(pose, scene);
        let d = scene.grid.pose_center(pose).distance(&scene.object.center);
        let area_ok = det.bbox.is_none() || bbox_area(&det) > self.min_bbox_area;
        det.score < self.max_score && area_ok && d > self.min_distance
    }
}

/// All rule-passing poses, row-major over cells and heading-minor.
pub fn select_initial_poses(scene: &Scene, rules: &PoseRules) -> Result<Vec<Pose>> {
    let pool: Vec<Pose> = scene
        .grid
        .all_poses()
        .into_iter()
        .filter(|p| rules.accepts(p, scene))
        .collect();
    if pool.is_empty() {
        return Err(CoreError::EmptyPool(scene.id()));
    }
    Ok(pool)
}

/// Geometry knobs for scene generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub detector: DetectorParams,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            width: 20,
            height: 20,
            cell_size: 0.3,
            detector: DetectorParams::default(),
        }
    }
}

/// Generates a reproducible scene. Retries with derived streams until the
/// scene invariants hold and a non-empty start pool exists.
pub fn generate_scene(category: Category, seed: u64, params: &GenParams) -> Result<Scene> {
    let min_side = match category {
        Category::Open => 5,
        Category::Trap => TRAP_MIN_SIDE,
        _ => 10,
    };
    if params.width < min_side || params.height < min_side {
        return Err(CoreError::Usage(format!(
            "{category} scenes need at least {min_side}x{min_side} cells, got {}x{}",
            params.width, params.height
        )));
    }
    params.detector.validate()?;
    let rules = PoseRules::default();
    for attempt in 0..MAX_ATTEMPTS {
        let stream = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(category.salt())
            .wrapping_add(attempt.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let Some(scene) = build(category, seed, params, &mut rng)? else {
            continue;
        };
        if scene.validate().is_err() || select_initial_poses(&scene, &rules).is_err() {
            continue;
        }
        if category == Category::Trap && !trap_is_meaningful(&scene) {
            continue;
        }
        return Ok(scene);
    }
    Err(CoreError::Feasibility(format!(
        "{category}-{seed}: no valid scene after {MAX_ATTEMPTS} attempts"
    )))
}

fn random_object(rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> ObjectSpec {
    ObjectSpec {
        center: Point::new(cx, cy),
        radius: rng.gen_range(0.12..0.22),
        aspect: rng.gen_range(0.6..1.6),
        id: rng.gen_range(0..1000),
    }
}

fn build(category: Category, seed: u64, params: &GenParams, rng: &mut ChaCha8Rng) -> Result<Option<Scene>> {
    let (w, h, c) = (params.width, params.height, params.cell_size);
    let mut grid = OccupancyGrid::room(w, h, c)?;
    let scene_of = |grid: OccupancyGrid, object: ObjectSpec| Scene {
        grid,
        object,
        detector: params.detector,
        category,
        seed,
    };
    if category == Category::Trap {
        return Ok(build_trap(grid, params, rng).map(|(g, o)| scene_of(g, o)));
    }
    let ox = rng.gen_range(2..w - 2);
    let oy = rng.gen_range(2..h - 2);
    let object = random_object(rng, (ox as f64 + 0.5) * c, (oy as f64 + 0.5) * c);
    let n_rects = match category {
        Category::Open => 0,
        Category::Sparse => rng.gen_range(1..=3),
        Category::Cluttered => rng.gen_range(4..=8),
        Category::Trap => unreachable!(),
    };
    let mut placed = 0;
    let mut tries = 0;
    while placed < n_rects && tries < 200 {
        tries += 1;
        let rw = rng.gen_range(1..=3);
        let rh = rng.gen_range(1..=4);
        let (rw, rh) = if rng.gen_bool(0.5) { (rw, rh) } else { (rh, rw) };
        let x0 = rng.gen_range(1..w - rw);
        let y0 = rng.gen_range(1..h - rh);
        // keep a one-cell margin around the object cell
        if (x0 as i64 - 1..=(x0 + rw) as i64).contains(&(ox as i64))
            && (y0 as i64 - 1..=(y0 + rh) as i64).contains(&(oy as i64))
        {
            continue;
        }
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                grid.set(x, y, Cell::Obstacle);
            }
        }
        placed += 1;
    }
    if placed < n_rects {
        return Ok(None);
    }
    Ok(Some(scene_of(grid, object)))
}

const TRAP_MIN_SIDE: usize = 14;

/// Trap layout in a canonical frame (object near the north wall, barrier
/// across the approach from the south), then rotated by a random quarter turn.
fn build_trap(mut grid: OccupancyGrid, params: &GenParams, rng: &mut ChaCha8Rng) -> Option<(OccupancyGrid, ObjectSpec)> {
    let (w, h, c) = (params.width, params.height, params.cell_size);
    if w != h {
        return None;
    }
    let n = w;
    let oy = n - 4;
    let ox = rng.gen_range(6..n - 6);
    let gap = rng.gen_range(8..=9);
    let half = 2;
    let shift: i64 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let by = oy - gap;
    let bx0 = (ox as i64 + shift - half as i64).max(1) as usize;
    let bx1 = ((ox as i64 + shift + half as i64) as usize).min(n - 2);
    let turns = rng.gen_range(0..4);
    let rot = |x: usize, y: usize| -> (usize, usize) {
        let (mut x, mut y) = (x, y);
        for _ in 0..turns {
            (x, y) = (n - 1 - y, x);
        }
        (x, y)
    };
    for x in bx0..=bx1 {
        let (rx, ry) = rot(x, by);
        grid.set(rx, ry, Cell::Obstacle);
    }
    // distractor blocks away from the object and the approach corridor
    let extra = rng.gen_range(2..=4);
    for _ in 0..extra {
        let (mut rw, mut rh) = (rng.gen_range(1..=2usize), rng.gen_range(2..=3usize));
        if rng.gen_bool(0.5) {
            (rw, rh) = (rh, rw);
        }
        let x0 = rng.gen_range(1..n - 1 - rw);
        let y0 = rng.gen_range(1..n - 1 - rh);
        let blocked = (x0..x0 + rw).any(|x| {
            (y0..y0 + rh).any(|y| {
                let (dx, dy) = (x as i64 - ox as i64, y as i64 - oy as i64);
                let near_object = dx.abs() <= 2 && dy.abs() <= 2;
                let in_corridor = dx.abs() <= half as i64 + 3 && (-13..0).contains(&dy);
                near_object || in_corridor
            })
        });
        if blocked {
            continue;
        }
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                let (rx, ry) = rot(x, y);
                grid.set(rx, ry, Cell::Obstacle);
            }
        }
    }
    let (rx, ry) = rot(ox, oy);
    let object = random_object(rng, (rx as f64 + 0.5) * c, (ry as f64 + 0.5) * c);
    Some((grid, object))
}

/// A trap needs a blocked canonical start and a detour: some rule-passing
/// start must reach a pose with score >= 0.8 within the episode horizon.
fn trap_is_meaningful(scene: &Scene) -> bool {
    if scene.grid.interior_obstacles() == 0 || scene.canonical_start().is_none() {
        return false;
    }
    let Ok(pool) = select_initial_poses(scene, &PoseRules::default()) else {
        return false;
    };
    detour_reachable(scene, &pool, DEFAULT_HORIZON)
}

/// Multi-source breadth-first search over poses, at most `horizon` actions.
pub fn detour_reachable(scene: &Scene, starts: &[Pose], horizon: usize) -> bool {
    let grid = &scene.grid;
    let mut seen = vec![false; grid.pose_table_len()];
    let mut frontier: Vec<Pose> = Vec::new();
    for p in starts {
        if !seen[grid.pose_index(p)] {
            seen[grid.pose_index(p)] = true;
            frontier.push(*p);
        }
    }
    for depth in 0..=horizon {
        if frontier.iter().any(|p| detect(p, scene).score >= FEASIBLE_SCORE) {
            return true;
        }
        if depth == horizon {
            break;
        }
        let mut next = Vec::new();
        for p in &frontier {
            for a in Action::ALL {
                let q = transition(p, a, grid);
                let i = grid.pose_index(&q);
                if !seen[i] {
                    seen[i] = true;
                    next.push(q);
                }
            }
        }
        frontier = next;
    }
    false
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    w: usize,
    h: usize,
    cell_size: f64,
    /// Row-major run lengths of `[flag, count]`, flag 1 = obstacle.
    rle_cells: Vec<[u32; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    category: Category,
    seed: u64,
    grid: GridFile,
    object: ObjectSpec,
    detector_params: DetectorParams,
}

fn encode_rle(cells: &[Cell]) -> Vec<[u32; 2]> {
    let mut runs: Vec<[u32; 2]> = Vec::new();
    for c in cells {
        let flag = u32::from(*c == Cell::Obstacle);
        match runs.last_mut() {
            Some(run) if run[0] == flag => run[1] += 1,
            _ => runs.push([flag, 1]),
        }
    }
    runs
}

fn decode_rle(runs: &[[u32; 2]]) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for &[flag, count] in runs {
        let cell = match flag {
            0 => Cell::Free,
            1 => Cell::Obstacle,
            other => return Err(CoreError::Format(format!("bad cell flag {other}"))),
        };
        cells.extend(std::iter::repeat(cell).take(count as usize));
    }
    Ok(cells)
}

impl Scene {
    pub fn to_json(&self) -> Result<String> {
        let file = SceneFile {
            version: SCENE_FILE_VERSION,
            category: self.category,
            seed: self.seed,
            grid: GridFile {
                w: self.grid.width(),
                h: self.grid.height(),
                cell_size: self.grid.cell_size(),
                rle_cells: encode_rle(self.grid.cells()),
            },
            object: self.object,
            detector_params: self.detector,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text)?;
        if file.version != SCENE_FILE_VERSION {
            return Err(CoreError::Format(format!("unsupported scene version {}", file.version)));
        }
        let cells = decode_rle(&file.grid.rle_cells)?;
        let grid = OccupancyGrid::from_cells(file.grid.w, file.grid.h, file.grid.cell_size, cells)?;
        Ok(Scene {
            grid,
            object: file.object,
            detector: file.detector_params,
            category: file.category,
            seed: file.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_scenes_have_no_interior_obstacles() {
        let s = generate_scene(Category::Open, 1, &GenParams::default()).unwrap();
        assert_eq!(s.grid.interior_obstacles(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        for cat in Category::ALL {
            let a = generate_scene(cat, 11, &GenParams::default()).unwrap();
            let b = generate_scene(cat, 11, &GenParams::default()).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        }
    }

    #[test]
    fn obstacle_counts_follow_category() {
        for seed in 0..10 {
            let sparse = generate_scene(Category::Sparse, seed, &GenParams::default()).unwrap();
            let cluttered = generate_scene(Category::Cluttered, seed, &GenParams::default()).unwrap();
            assert!(sparse.grid.interior_obstacles() >= 1);
            assert!(cluttered.grid.interior_obstacles() >= 4);
        }
    }

    #[test]
    fn small_grids_rejected_for_obstacle_categories() {
        let p = GenParams { width: 8, height: 8, ..Default::default() };
        assert!(generate_scene(Category::Sparse, 0, &p).is_err());
    }

    #[test]
    fn scene_file_round_trips() {
        for cat in Category::ALL {
            let s = generate_scene(cat, 3, &GenParams::default()).unwrap();
            let back = Scene::from_json(&s.to_json().unwrap()).unwrap();
            assert_eq!(s, back);
        }
    }

    #[test]
    fn rule_examples() {
        let rules = PoseRules::default();
        let s = generate_scene(Category::Open, 2, &GenParams::default()).unwrap();
        for p in s.grid.all_poses() {
            let det = detect(&p, &s);
            let d = s.grid.pose_center(&p).distance(&s.object.center);
            if det.score >= 0.2 || d <= 3.0 {
                assert!(!rules.accepts(&p, &s));
            }
            if det.bbox.is_none() && d > 3.0 {
                assert!(rules.accepts(&p, &s));
            }
        }
    }

    #[test]
    fn pool_is_deterministic_and_rule_abiding() {
        let s = generate_scene(Category::Cluttered, 5, &GenParams::default()).unwrap();
        let rules = PoseRules::default();
        let a = select_initial_poses(&s, &rules).unwrap();
        let b = select_initial_poses(&s, &rules).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| rules.accepts(p, &s)));
        let mut sorted = a.clone();
        sorted.sort_by_key(|p| (p.y, p.x, p.heading));
        assert_eq!(a, sorted);
    }
}
