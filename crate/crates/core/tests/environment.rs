mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swarmplan::environment::{colliding_segments, find_safe_path, march_to_exit, AnchorSearch, EnvironmentError};
use swarmplan::{BSplineTrajectory, OccupancyGrid, Vec3};

use common::{dense_collision_intervals, dijkstra_length};

fn random_box_world(rng: &mut ChaCha8Rng, boxes: usize) -> OccupancyGrid {
    let mut grid = OccupancyGrid::from_bounds(Vec3::zeros(), Vec3::new(4.0, 4.0, 1.0), 0.1, 0.1).unwrap();
    for _ in 0..boxes {
        let min = Vec3::new(rng.gen_range(0.0..3.5), rng.gen_range(0.0..3.5), 0.0);
        let size = Vec3::new(rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8), rng.gen_range(0.2..1.0));
        grid.add_box(min, min + size);
    }
    grid
}

fn random_free_point(rng: &mut ChaCha8Rng, grid: &OccupancyGrid) -> Vec3 {
    loop {
        let p = Vec3::new(rng.gen_range(0.05..3.95), rng.gen_range(0.05..3.95), rng.gen_range(0.05..0.95));
        if !grid.is_occupied(&p) {
            return p;
        }
    }
}

#[test]
fn search_path_length_matches_dijkstra() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut compared = 0;
    for _ in 0..30 {
        let grid = random_box_world(&mut rng, 12);
        let a = random_free_point(&mut rng, &grid);
        let b = random_free_point(&mut rng, &grid);
        let oracle = dijkstra_length(&grid, grid.index_of(&a).unwrap(), grid.index_of(&b).unwrap());
        match (find_safe_path(&grid, &a, &b), oracle) {
            (Ok(path), Some(len)) => {
                assert!((path.graph_length - len).abs() < 1e-9, "{} vs {len}", path.graph_length);
                assert_eq!(path.polyline.first(), Some(&a));
                assert_eq!(path.polyline.last(), Some(&b));
                for w in path.polyline.windows(2) {
                    assert!(grid.segment_is_free(&w[0], &w[1]));
                }
                compared += 1;
            }
            (Err(EnvironmentError::NoPath), None) => {}
            (found, oracle) => panic!("search {:?} disagrees with oracle {oracle:?}", found.map(|p| p.graph_length)),
        }
    }
    assert!(compared >= 20);
}

#[test]
fn blocked_endpoint_is_rejected() {
    let mut grid = OccupancyGrid::from_bounds(Vec3::zeros(), Vec3::new(2.0, 2.0, 1.0), 0.1, 0.0).unwrap();
    grid.add_box(Vec3::new(0.9, 0.9, 0.0), Vec3::new(1.1, 1.1, 1.0));
    let err = find_safe_path(&grid, &Vec3::new(1.0, 1.0, 0.5), &Vec3::new(0.2, 0.2, 0.5));
    assert!(matches!(err, Err(EnvironmentError::BlockedEndpoint(_))));
}

#[test]
fn colliding_segments_match_dense_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..40 {
        let grid = random_box_world(&mut rng, 8);
        let ctrl: Vec<Vec3> = (0..10)
            .map(|_| Vec3::new(rng.gen_range(0.2..3.8), rng.gen_range(0.2..3.8), rng.gen_range(0.2..0.8)))
            .collect();
        let traj = BSplineTrajectory::new(3, ctrl, 0.5, 0.0).unwrap();
        let found = colliding_segments(&grid, &traj);
        let dense = dense_collision_intervals(&grid, &traj, 1e-4);
        // Every densely sampled interval longer than the checker's sample step
        // overlaps a reported one, and every reported one is truly colliding.
        let step = swarmplan::environment::collision_sample_step(&traj, grid.resolution() / 2.0);
        for &(s, e) in dense.iter().filter(|(s, e)| e - s > step) {
            assert!(
                found.iter().any(|f| f.t_start <= e && f.t_end >= s),
                "missed interval [{s}, {e}]"
            );
        }
        for f in &found {
            assert!(grid.is_occupied(&traj.evaluate_clamped(f.t_start)));
            assert!(grid.is_occupied(&traj.evaluate_clamped(f.t_end)));
            assert!(dense.iter().any(|&(s, e)| s <= f.t_end + 1e-4 && e >= f.t_start - 1e-4));
            if let Some((_, p)) = f.before {
                assert!(!grid.is_occupied(&p));
            }
            if let Some((_, p)) = f.after {
                assert!(!grid.is_occupied(&p));
            }
        }
    }
}

#[test]
fn march_finds_the_far_face() {
    let mut grid = OccupancyGrid::from_bounds(Vec3::zeros(), Vec3::new(4.0, 2.0, 2.0), 0.1, 0.0).unwrap();
    grid.add_box(Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 2.0, 2.0));
    let search = AnchorSearch::for_grid(&grid);
    let exit = march_to_exit(&grid, &Vec3::new(1.5, 1.0, 1.0), &Vec3::x(), &search).unwrap();
    assert!((exit.x - 2.0).abs() < 0.02, "{exit}");
}

#[test]
fn snapshot_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let grid = random_box_world(&mut rng, 5);
    let mut buf = Vec::new();
    grid.write_snapshot(&mut buf).unwrap();
    let back = OccupancyGrid::read_snapshot(buf.as_slice()).unwrap();
    assert_eq!(back.dims(), grid.dims());
    assert_eq!(back.raw_count(), grid.raw_count());
    assert_eq!(back.inflated_count(), grid.inflated_count());
    assert!(back.raw_voxels().eq(grid.raw_voxels()));
}

proptest! {
    #[test]
    fn inflation_covers_every_raw_voxel(
        cells in prop::collection::vec((0usize..20, 0usize..20, 0usize..5), 1..20),
        inflation in 0.0f64..0.35,
    ) {
        let mut grid = OccupancyGrid::new(0.1, Vec3::zeros(), [20, 20, 5], inflation).unwrap();
        for &(i, j, k) in &cells {
            grid.set_voxel([i, j, k]);
        }
        for v in grid.raw_voxels() {
            prop_assert!(grid.voxel_occupied(v));
            let c = grid.voxel_center(v);
            // Points within the inflation radius of an occupied center are occupied.
            let probe = c + Vec3::new(inflation * 0.99, 0.0, 0.0);
            if grid.in_bounds(&probe) {
                prop_assert!(grid.is_occupied(&probe));
            }
        }
        prop_assert!(grid.inflated_count() >= grid.raw_count());
    }

    #[test]
    fn raycast_agrees_with_stepping(
        ox in 0.1f64..0.9, oy in 0.1f64..3.9, oz in 0.1f64..0.9,
        angle in -1.2f64..1.2,
    ) {
        let mut grid = OccupancyGrid::from_bounds(Vec3::zeros(), Vec3::new(4.0, 4.0, 1.0), 0.1, 0.0).unwrap();
        grid.add_box(Vec3::new(2.5, 0.0, 0.0), Vec3::new(3.0, 4.0, 1.0));
        let origin = Vec3::new(ox, oy, oz);
        let dir = Vec3::new(angle.cos(), angle.sin(), 0.0);
        let hit = grid.raycast(&origin, &dir, 10.0);
        let mut stepped = None;
        let mut t = 0.0;
        while t < 10.0 {
            let p = origin + dir * t;
            if !grid.in_bounds(&p) {
                break;
            }
            if grid.is_raw_occupied(&p) {
                stepped = Some(t);
                break;
            }
            t += 1e-3;
        }
        match (hit, stepped) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 2e-3, "{} vs {}", a, b),
            (None, None) => {}
            (a, b) => prop_assert!(false, "raycast {:?} vs stepping {:?}", a, b),
        }
    }
}
