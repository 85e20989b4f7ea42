//! Discretized planar environment: poses on a cell lattice, the seven-action
//! transition function, and ray geometry over the occupancy grid.

use serde::{Deserialize, Serialize};

use crate::detection::detect;
use crate::error::{CoreError, Result};
use crate::scenario::Scene;

/// Number of discrete headings (30° apart).
pub const N_HEADINGS: u8 = 12;
pub const HEADING_STEP_DEG: f64 = 30.0;
pub const N_ACTIONS: usize = 7;

/// Tolerance (in cell units) for treating two boundary crossings as one corner.
const CORNER_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    /// Multiples of 30° counter-clockwise from +x.
    pub heading: u8,
}

impl Pose {
    pub fn new(x: usize, y: usize, heading: u8) -> Self {
        Self {
            x,
            y,
            heading: heading % N_HEADINGS,
        }
    }

    pub fn heading_rad(&self) -> f64 {
        (self.heading as f64 * HEADING_STEP_DEG).to_radians()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Action {
    MoveNorth = 0,
    MoveSouth = 1,
    MoveWest = 2,
    MoveEast = 3,
    RotateCcw = 4,
    RotateCw = 5,
    Stop = 6,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::MoveNorth,
        Action::MoveSouth,
        Action::MoveWest,
        Action::MoveEast,
        Action::RotateCcw,
        Action::RotateCw,
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(CoreError::InvalidAction(i))
    }

    /// Grid-frame displacement of a translation.
    pub fn translation(self) -> Option<(i64, i64)> {
        match self {
            Action::MoveNorth => Some((0, 1)),
            Action::MoveSouth => Some((0, -1)),
            Action::MoveWest => Some((-1, 0)),
            Action::MoveEast => Some((1, 0)),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveNorth => "north",
            Action::MoveSouth => "south",
            Action::MoveWest => "west",
            Action::MoveEast => "east",
            Action::RotateCcw => "ccw",
            Action::RotateCw => "cw",
            Action::Stop => "stop",
        }
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let i = u8::deserialize(d)?;
        Action::from_index(i as usize).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Obstacle,
}

/// Point in meters, grid frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    cell_size: f64,
    cells: Vec<Cell>,
}

impl OccupancyGrid {
    /// Closed room: border cells are obstacles, interior is free.
    pub fn room(width: usize, height: usize, cell_size: f64) -> Result<Self> {
        if width * height < 25 || width < 3 || height < 3 {
            return Err(CoreError::InvalidGrid(format!("{width}x{height} is too small")));
        }
        if !(cell_size > 0.0) {
            return Err(CoreError::InvalidGrid(format!("cell size {cell_size} must be positive")));
        }
        let mut cells = vec![Cell::Free; width * height];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x == width - 1 || y == height - 1 {
                    cells[y * width + x] = Cell::Obstacle;
                }
            }
        }
        Ok(Self {
            width,
            height,
            cell_size,
            cells,
        })
    }

    pub fn from_cells(width: usize, height: usize, cell_size: f64, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != width * height {
            return Err(CoreError::InvalidGrid(format!(
                "{} cells for a {width}x{height} grid",
                cells.len()
            )));
        }
        let mut grid = Self::room(width, height, cell_size)?;
        for (i, c) in cells.into_iter().enumerate() {
            let (x, y) = (i % width, i / width);
            let border = x == 0 || y == 0 || x == width - 1 || y == height - 1;
            if border && c != Cell::Obstacle {
                return Err(CoreError::InvalidGrid(format!("border cell ({x},{y}) is free")));
            }
            grid.cells[i] = c;
        }
        Ok(grid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Obstacle when out of bounds.
    pub fn cell(&self, x: i64, y: i64) -> Cell {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            Cell::Obstacle
        } else {
            self.cells[y as usize * self.width + x as usize]
        }
    }

    pub fn is_free(&self, x: i64, y: i64) -> bool {
        self.cell(x, y) == Cell::Free
    }

    pub fn set(&mut self, x: usize, y: usize, cell: Cell) {
        let border = x == 0 || y == 0 || x == self.width - 1 || y == self.height - 1;
        if x < self.width && y < self.height && !border {
            self.cells[y * self.width + x] = cell;
        }
    }

    pub fn interior_obstacles(&self) -> usize {
        let mut n = 0;
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                if self.cells[y * self.width + x] == Cell::Obstacle {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn cell_center(&self, x: usize, y: usize) -> Point {
        Point::new((x as f64 + 0.5) * self.cell_size, (y as f64 + 0.5) * self.cell_size)
    }

    pub fn pose_center(&self, pose: &Pose) -> Point {
        self.cell_center(pose.x, pose.y)
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64 * self.cell_size, self.height as f64 * self.cell_size)
    }

    pub fn check_pose(&self, pose: &Pose) -> Result<()> {
        if pose.heading >= N_HEADINGS || !self.is_free(pose.x as i64, pose.y as i64) {
            return Err(CoreError::InvalidPose(*pose));
        }
        Ok(())
    }

    /// Every valid pose, row-major over cells and heading-minor.
    pub fn all_poses(&self) -> Vec<Pose> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_free(x as i64, y as i64) {
                    out.extend((0..N_HEADINGS).map(|h| Pose::new(x, y, h)));
                }
            }
        }
        out
    }

    /// Dense index for a pose, suitable for lookup tables.
    pub fn pose_index(&self, pose: &Pose) -> usize {
        (pose.y * self.width + pose.x) * N_HEADINGS as usize + pose.heading as usize
    }

    pub fn pose_table_len(&self) -> usize {
        self.width * self.height * N_HEADINGS as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_pose: Pose,
    pub reward: f64,
    pub stopped: bool,
}

/// Pose after applying `action`, ignoring the stop flag and reward.
pub fn transition(pose: &Pose, action: Action, grid: &OccupancyGrid) -> Pose {
    match action {
        Action::RotateCcw => Pose::new(pose.x, pose.y, (pose.heading + 1) % N_HEADINGS),
        Action::RotateCw => Pose::new(pose.x, pose.y, (pose.heading + N_HEADINGS - 1) % N_HEADINGS),
        Action::Stop => *pose,
        _ => {
            let (dx, dy) = action.translation().expect("translation");
            let (nx, ny) = (pose.x as i64 + dx, pose.y as i64 + dy);
            if grid.is_free(nx, ny) {
                Pose::new(nx as usize, ny as usize, pose.heading)
            } else {
                *pose
            }
        }
    }
}

/// One environment step under stop-freeze semantics. The reward is the
/// detection score at the resulting pose.
pub fn step(pose: &Pose, action: Action, scene: &Scene, stopped: bool) -> Result<StepOutcome> {
    scene.grid.check_pose(pose)?;
    let (next_pose, stopped) = if stopped {
        (*pose, true)
    } else if action == Action::Stop {
        (*pose, true)
    } else {
        (transition(pose, action, &scene.grid), false)
    };
    let reward = detect(&next_pose, scene).score;
    Ok(StepOutcome {
        next_pose,
        reward,
        stopped,
    })
}

/// Visits every cell whose closed square meets the segment from `a` to `b`
/// (both in cell units), in traversal order. Cells touched only at a corner
/// are included.
pub(crate) fn supercover(a: (f64, f64), b: (f64, f64), mut visit: impl FnMut(i64, i64) -> bool) {
    let (x0, y0) = a;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut cx = x0.floor() as i64;
    let mut cy = y0.floor() as i64;
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > 0.0 {
        (cx as f64 + 1.0 - x0) / dx
    } else if dx < 0.0 {
        (x0 - cx as f64) / -dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        (cy as f64 + 1.0 - y0) / dy
    } else if dy < 0.0 {
        (y0 - cy as f64) / -dy
    } else {
        f64::INFINITY
    };
    // a segment running exactly along a grid line touches both neighbouring columns/rows
    let on_vertical_line = dx == 0.0 && (x0 - x0.round()).abs() < CORNER_EPS;
    let on_horizontal_line = dy == 0.0 && (y0 - y0.round()).abs() < CORNER_EPS;
    if on_vertical_line {
        cx = x0.round() as i64;
    }
    if on_horizontal_line {
        cy = y0.round() as i64;
    }
    let mut emit = |x: i64, y: i64| -> bool {
        if !visit(x, y) {
            return false;
        }
        if on_vertical_line && !visit(x - 1, y) {
            return false;
        }
        if on_horizontal_line && !visit(x, y - 1) {
            return false;
        }
        true
    };
    if !emit(cx, cy) {
        return;
    }
    loop {
        let t = t_max_x.min(t_max_y);
        if t > 1.0 + CORNER_EPS {
            return;
        }
        if (t_max_x - t_max_y).abs() < CORNER_EPS {
            if !emit(cx + step_x, cy) || !emit(cx, cy + step_y) {
                return;
            }
            cx += step_x;
            cy += step_y;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        } else if t_max_x < t_max_y {
            cx += step_x;
            t_max_x += t_delta_x;
        } else {
            cy += step_y;
            t_max_y += t_delta_y;
        }
        if !emit(cx, cy) {
            return;
        }
    }
}

/// True iff the segment between two points (meters) touches an obstacle cell
/// other than the cells containing its endpoints.
pub fn ray_blocked(from: Point, to: Point, grid: &OccupancyGrid) -> bool {
    let c = grid.cell_size;
    let a = (from.x / c, from.y / c);
    let b = (to.x / c, to.y / c);
    let start = (a.0.floor() as i64, a.1.floor() as i64);
    let end = (b.0.floor() as i64, b.1.floor() as i64);
    let mut blocked = false;
    supercover(a, b, |x, y| {
        if (x, y) != start && (x, y) != end && grid.cell(x, y) == Cell::Obstacle {
            blocked = true;
            return false;
        }
        true
    });
    blocked
}

/// Distance (meters) from `origin` along `angle` to the first obstacle cell
/// boundary, capped at `max_range`.
pub fn cast_ray(origin: Point, angle: f64, max_range: f64, grid: &OccupancyGrid) -> f64 {
    let c = grid.cell_size;
    let (x0, y0) = (origin.x / c, origin.y / c);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut cx = x0.floor() as i64;
    let mut cy = y0.floor() as i64;
    if grid.cell(cx, cy) == Cell::Obstacle {
        return 0.0;
    }
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let tiny = 1e-12;
    let t_delta_x = if dx.abs() > tiny { 1.0 / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy.abs() > tiny { 1.0 / dy.abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > tiny {
        (cx as f64 + 1.0 - x0) / dx
    } else if dx < -tiny {
        (x0 - cx as f64) / -dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > tiny {
        (cy as f64 + 1.0 - y0) / dy
    } else if dy < -tiny {
        (y0 - cy as f64) / -dy
    } else {
        f64::INFINITY
    };
    let limit = max_range / c;
    loop {
        let t = t_max_x.min(t_max_y);
        if t >= limit {
            return max_range;
        }
        if (t_max_x - t_max_y).abs() < CORNER_EPS {
            let side_hit = grid.cell(cx + step_x, cy) == Cell::Obstacle
                || grid.cell(cx, cy + step_y) == Cell::Obstacle;
            cx += step_x;
            cy += step_y;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
            if side_hit || grid.cell(cx, cy) == Cell::Obstacle {
                return t * c;
            }
        } else if t_max_x < t_max_y {
            cx += step_x;
            t_max_x += t_delta_x;
            if grid.cell(cx, cy) == Cell::Obstacle {
                return t * c;
            }
        } else {
            cy += step_y;
            t_max_y += t_delta_y;
            if grid.cell(cx, cy) == Cell::Obstacle {
                return t * c;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthConfig {
    pub n_rays: usize,
    pub fov_deg: f64,
    pub max_range: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            n_rays: 11,
            fov_deg: 90.0,
            max_range: 6.0,
        }
    }
}

impl DepthConfig {
    /// Bearing of ray `k` relative to the heading, in degrees.
    pub fn ray_offset_deg(&self, k: usize) -> f64 {
        if self.n_rays <= 1 {
            0.0
        } else {
            self.fov_deg * (k as f64 / (self.n_rays - 1) as f64 - 0.5)
        }
    }
}

/// Normalized range fan centred on the heading; one value in [0, 1] per ray.
pub fn depth_scan(pose: &Pose, grid: &OccupancyGrid, cfg: &DepthConfig) -> Vec<f64> {
    let origin = grid.pose_center(pose);
    let heading = pose.heading_rad();
    (0..cfg.n_rays)
        .map(|k| {
            let angle = heading + cfg.ray_offset_deg(k).to_radians();
            cast_ray(origin, angle, cfg.max_range, grid) / cfg.max_range
        })
        .collect()
}
