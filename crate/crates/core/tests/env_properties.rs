use activedt_core::detection::{
    bearing_deg, detect, observe, ChannelMask, DetectorParams, SensorConfig,
};
use activedt_core::env::{
    depth_scan, ray_blocked, step, transition, Action, Cell, DepthConfig, OccupancyGrid, Point, Pose,
};
use activedt_core::scenario::{generate_scene, Category, GenParams, ObjectSpec, Scene};
use proptest::prelude::*;

const C: f64 = 0.3;

fn grid_from(width: usize, height: usize, obstacles: &[(usize, usize)]) -> OccupancyGrid {
    let mut g = OccupancyGrid::room(width, height, C).unwrap();
    for &(x, y) in obstacles {
        if x > 0 && y > 0 && x < width - 1 && y < height - 1 {
            g.set(x, y, Cell::Obstacle);
        }
    }
    g
}

fn scene_with(grid: OccupancyGrid, center: Point) -> Scene {
    Scene {
        grid,
        object: ObjectSpec {
            center,
            radius: 0.15,
            aspect: 1.0,
            id: 0,
        },
        detector: DetectorParams::default(),
        category: Category::Sparse,
        seed: 0,
    }
}

fn free_poses(grid: &OccupancyGrid) -> Vec<Pose> {
    grid.all_poses()
}

fn small_grid() -> impl Strategy<Value = OccupancyGrid> {
    prop::collection::vec((1usize..7, 1usize..7), 0..12).prop_map(|obs| grid_from(8, 8, &obs))
}

/// Closed-square vs segment intersection by slab clipping.
fn segment_touches_cell(a: (f64, f64), b: (f64, f64), cx: i64, cy: i64) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let d = (b.0 - a.0, b.1 - a.1);
    for (p, dp, lo, hi) in [(a.0, d.0, cx as f64, cx as f64 + 1.0), (a.1, d.1, cy as f64, cy as f64 + 1.0)] {
        if dp == 0.0 {
            if p < lo || p > hi {
                return false;
            }
        } else {
            let (mut ta, mut tb) = ((lo - p) / dp, (hi - p) / dp);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

fn brute_force_blocked(from: Point, to: Point, grid: &OccupancyGrid) -> bool {
    let a = (from.x / C, from.y / C);
    let b = (to.x / C, to.y / C);
    let start = (a.0.floor() as i64, a.1.floor() as i64);
    let end = (b.0.floor() as i64, b.1.floor() as i64);
    (0..grid.height() as i64).any(|y| {
        (0..grid.width() as i64).any(|x| {
            (x, y) != start
                && (x, y) != end
                && grid.cell(x, y) == Cell::Obstacle
                && segment_touches_cell(a, b, x, y)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transitions_are_deterministic_and_stay_on_free_cells(grid in small_grid()) {
        for p in free_poses(&grid) {
            for a in Action::ALL {
                let q = transition(&p, a, &grid);
                prop_assert_eq!(q, transition(&p, a, &grid));
                prop_assert!(grid.is_free(q.x as i64, q.y as i64));
                prop_assert!(q.heading < 12);
            }
        }
    }

    #[test]
    fn twelve_rotations_return_home(x in 1usize..7, y in 1usize..7, h in 0u8..12) {
        let grid = grid_from(8, 8, &[]);
        let mut p = Pose::new(x, y, h);
        for _ in 0..12 {
            p = transition(&p, Action::RotateCw, &grid);
        }
        prop_assert_eq!(p, Pose::new(x, y, h));
    }

    #[test]
    fn stop_absorbs_every_action(x in 1usize..19, y in 1usize..19, h in 0u8..12) {
        let s = scene_with(grid_from(20, 20, &[]), Point::new(3.0, 3.15));
        let p = Pose::new(x, y, h);
        let first = step(&p, Action::Stop, &s, false).unwrap();
        prop_assert!(first.stopped);
        for a in Action::ALL {
            let o = step(&first.next_pose, a, &s, true).unwrap();
            prop_assert_eq!(o.next_pose, p);
            prop_assert!(o.stopped);
            prop_assert_eq!(o.reward, first.reward);
        }
    }

    #[test]
    fn ray_blocked_matches_exhaustive_cell_test(
        grid in small_grid(),
        a in (0.05f64..2.35, 0.05f64..2.35),
        b in (0.05f64..2.35, 0.05f64..2.35),
    ) {
        let from = Point::new(a.0, a.1);
        let to = Point::new(b.0, b.1);
        prop_assert_eq!(ray_blocked(from, to, &grid), brute_force_blocked(from, to, &grid));
    }

    #[test]
    fn clearing_an_obstacle_never_shortens_depth(grid in small_grid(), pick in 0usize..100) {
        let interior: Vec<(usize, usize)> = (1..7)
            .flat_map(|y| (1..7).map(move |x| (x, y)))
            .filter(|&(x, y)| grid.cell(x as i64, y as i64) == Cell::Obstacle)
            .collect();
        prop_assume!(!interior.is_empty());
        let (ox, oy) = interior[pick % interior.len()];
        let mut cleared = grid.clone();
        cleared.set(ox, oy, Cell::Free);
        let cfg = DepthConfig::default();
        for p in free_poses(&grid) {
            let before = depth_scan(&p, &grid, &cfg);
            let after = depth_scan(&p, &cleared, &cfg);
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(a >= b, "pose {:?}: {} -> {}", p, b, a);
            }
        }
    }

    #[test]
    fn adding_an_obstacle_never_raises_the_score(
        obs in prop::collection::vec((1usize..19, 1usize..19), 0..10),
        extra in (1usize..19, 1usize..19),
        x in 1usize..19, y in 1usize..19, h in 0u8..12,
    ) {
        let center = Point::new(3.15, 3.15);
        let keep_clear = |&(cx, cy): &(usize, usize)| {
            (cx, cy) != (x, y) && !((9..=11).contains(&cx) && (9..=11).contains(&cy))
        };
        let obs: Vec<_> = obs.into_iter().filter(keep_clear).collect();
        prop_assume!(keep_clear(&extra));
        let base = scene_with(grid_from(20, 20, &obs), center);
        let mut more = obs.clone();
        more.push(extra);
        let blocked = scene_with(grid_from(20, 20, &more), center);
        let p = Pose::new(x, y, h);
        prop_assume!(base.grid.is_free(x as i64, y as i64));
        prop_assert!(detect(&p, &blocked).score <= detect(&p, &base).score);
    }

    #[test]
    fn mirroring_preserves_score_and_negates_bearing(
        obs in prop::collection::vec((1usize..19, 1usize..19), 0..10),
        x in 1usize..19, y in 1usize..19, h in 0u8..12,
    ) {
        let center = Point::new(3.15, 3.15);
        let obs: Vec<_> = obs.into_iter().filter(|&(ox, oy)| !((9..=11).contains(&ox) && (9..=11).contains(&oy))).collect();
        let mirrored: Vec<_> = obs.iter().map(|&(ox, oy)| (ox, 19 - oy)).collect();
        let s = scene_with(grid_from(20, 20, &obs), center);
        let m = scene_with(grid_from(20, 20, &mirrored), Point::new(center.x, 6.0 - center.y));
        prop_assume!(s.grid.is_free(x as i64, y as i64));
        let p = Pose::new(x, y, h);
        let q = Pose::new(x, 19 - y, (12 - h) % 12);
        let (ds, dm) = (detect(&p, &s), detect(&q, &m));
        prop_assert!((ds.score - dm.score).abs() < 1e-9, "{} vs {}", ds.score, dm.score);
        let bs = bearing_deg(&p, s.grid.pose_center(&p), s.object.center);
        let bm = bearing_deg(&q, m.grid.pose_center(&q), m.object.center);
        if bs.abs() < 179.999 {
            prop_assert!((bs + bm).abs() < 1e-9);
        }
        if let (Some(a), Some(b)) = (ds.bbox, dm.bbox) {
            prop_assert!((a.cx - (300.0 - b.cx)).abs() < 1e-9);
        }
    }
}

#[test]
fn scores_and_boxes_are_well_formed_on_generated_scenes() {
    let params = GenParams {
        width: 14,
        height: 14,
        ..GenParams::default()
    };
    for cat in Category::ALL {
        for seed in 0..3 {
            let s = generate_scene(cat, seed, &params).unwrap();
            for p in s.grid.all_poses() {
                let d = detect(&p, &s);
                assert!((0.0..=1.0).contains(&d.score));
                assert_eq!(d.score == 0.0, d.bbox.is_none());
                if let Some(b) = d.bbox {
                    assert!(b.cx - b.w / 2.0 >= -1e-9 && b.cx + b.w / 2.0 <= 300.0 + 1e-9);
                    assert!(b.cy - b.h / 2.0 >= -1e-9 && b.cy + b.h / 2.0 <= 300.0 + 1e-9);
                }
            }
        }
    }
}

#[test]
fn detection_does_not_mutate_the_detector() {
    let s = generate_scene(Category::Cluttered, 4, &GenParams::default()).unwrap();
    let before = s.detector;
    for p in s.grid.all_poses().into_iter().take(500) {
        let _ = detect(&p, &s);
    }
    assert_eq!(s.detector, before);
}

#[test]
fn masking_is_idempotent() {
    let s = generate_scene(Category::Sparse, 2, &GenParams::default()).unwrap();
    let sensors = SensorConfig::default();
    for mask in ChannelMask::ABLATIONS {
        for p in s.grid.all_poses().into_iter().step_by(37) {
            let mut o = observe(&p, &s, &sensors, mask);
            let once = o.to_vec();
            o.apply_mask(mask);
            assert_eq!(o.to_vec(), once);
            assert!(once.iter().all(|v| (0.0..=1.0).contains(v)));
            if !mask.rgb {
                assert!(o.rgb_proxy.iter().all(|&v| v == 0.0));
            }
            if !mask.depth {
                assert!(o.depth_proxy.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(o.depth_proxy, depth_scan(&p, &s.grid, &sensors.depth));
            }
        }
    }
}

#[test]
fn step_examples() {
    let s = scene_with(grid_from(10, 10, &[(5, 6)]), Point::new(1.5, 0.45));
    let east = step(&Pose::new(5, 5, 0), Action::MoveEast, &s, false).unwrap();
    assert_eq!(east.next_pose, Pose::new(6, 5, 0));
    let wrap = step(&Pose::new(5, 5, 11), Action::RotateCcw, &s, false).unwrap();
    assert_eq!(wrap.next_pose, Pose::new(5, 5, 0));
    let stuck = step(&Pose::new(5, 5, 3), Action::MoveNorth, &s, false).unwrap();
    assert_eq!(stuck.next_pose, Pose::new(5, 5, 3));
    assert!(!stuck.stopped);
}
