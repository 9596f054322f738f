use proptest::prelude::*;

use swarmplan::drift::{
    detect_agent, fuse_depth, mask_agents, render_depth, update_drift, CameraModel, DetectionCriteria, DriftEstimate,
    SphereBody,
};
use swarmplan::{OccupancyGrid, Vec3};

const RADIUS: f64 = 0.2;
const TRUST: f64 = 0.5;

fn camera_at(position: Vec3) -> CameraModel {
    CameraModel::from_fov(96, 72, 90.0, 70.0, 5.0).with_body_pose(&position, 0.0)
}

fn world() -> OccupancyGrid {
    OccupancyGrid::from_bounds(Vec3::new(-1.0, -3.0, 0.0), Vec3::new(6.0, 3.0, 3.0), 0.1, 0.2).unwrap()
}

#[test]
fn detection_recovers_a_visible_sphere() {
    let cam = camera_at(Vec3::new(0.0, 0.0, 1.0));
    let criteria = DetectionCriteria::for_agent(RADIUS, TRUST);
    for (truth, predicted) in [
        (Vec3::new(3.0, 0.0, 1.0), Vec3::new(3.0, 0.3, 1.0)),
        (Vec3::new(2.0, 0.5, 1.2), Vec3::new(2.1, 0.4, 1.0)),
        (Vec3::new(4.0, -0.8, 1.0), Vec3::new(4.0, -0.5, 1.1)),
    ] {
        let body = SphereBody {
            id: 1,
            center: truth,
            radius: RADIUS,
        };
        let depth = render_depth(&cam, &world(), &[body]);
        let det = detect_agent(&cam, &depth, &predicted, TRUST, &criteria).expect("sphere should be detected");
        let err = (det.position - truth).norm();
        assert!(err < 0.1, "detected {} for {truth}, error {err}", det.position);
    }
}

#[test]
fn nothing_is_detected_in_empty_space() {
    let cam = camera_at(Vec3::new(0.0, 0.0, 1.0));
    let depth = render_depth(&cam, &world(), &[]);
    let criteria = DetectionCriteria::for_agent(RADIUS, TRUST);
    assert!(detect_agent(&cam, &depth, &Vec3::new(3.0, 0.0, 1.0), TRUST, &criteria).is_none());
}

#[test]
fn occluded_agent_is_not_used_for_drift() {
    let cam = camera_at(Vec3::new(0.0, 0.0, 1.0));
    let mut grid = world();
    grid.add_box(Vec3::new(1.5, -1.0, 0.0), Vec3::new(1.6, 1.0, 3.0));
    let body = SphereBody {
        id: 1,
        center: Vec3::new(3.0, 0.0, 1.0),
        radius: RADIUS,
    };
    let depth = render_depth(&cam, &grid, &[body]);
    let criteria = DetectionCriteria::for_agent(RADIUS, TRUST);
    assert!(detect_agent(&cam, &depth, &body.center, TRUST, &criteria).is_none());
}

#[test]
fn masked_depth_fuses_no_voxels_on_the_other_agent() {
    let cam = camera_at(Vec3::new(0.0, 0.0, 1.0));
    let mut grid = world();
    grid.add_box(Vec3::new(4.5, -3.0, 0.0), Vec3::new(4.6, 3.0, 3.0));
    let truth = Vec3::new(2.5, 0.2, 1.0);
    let body = SphereBody {
        id: 1,
        center: truth,
        radius: RADIUS,
    };
    let depth = render_depth(&cam, &grid, &[body]);
    let criteria = DetectionCriteria::for_agent(RADIUS, TRUST).relaxed();
    let det = detect_agent(&cam, &depth, &Vec3::new(2.5, 0.0, 1.0), TRUST, &criteria).unwrap();
    let masked = mask_agents(&cam, &depth, &[det]);

    let mut map = grid.empty_like();
    let added = fuse_depth(&mut map, &cam, &masked);
    assert!(added > 0, "the wall behind should still be mapped");
    for v in map.raw_voxels() {
        let c = map.voxel_center(v);
        assert!((c - truth).norm() > RADIUS + map.resolution(), "voxel {c} on the agent");
    }

    let mut unmasked = grid.empty_like();
    fuse_depth(&mut unmasked, &cam, &depth);
    assert!(unmasked
        .raw_voxels()
        .any(|v| (unmasked.voxel_center(v) - truth).norm() <= RADIUS + unmasked.resolution()));
}

#[test]
fn low_pass_estimate_converges_geometrically() {
    let truth = Vec3::new(0.0, -0.4, 0.0);
    let predicted = Vec3::new(1.0, 2.0, 1.0);
    let mut est = DriftEstimate::new(3);
    for k in 0..50 {
        est = update_drift(&est, &predicted, &(predicted + truth), 0.1, 0.5, k as f64);
    }
    let expected = 0.4 * 0.9f64.powi(50);
    assert!(((est.offset - truth).norm() - expected).abs() < 1e-12);
    assert_eq!(est.confidence, 50);

    let gated = update_drift(&est, &predicted, &(predicted + Vec3::new(2.0, 0.0, 0.0)), 0.1, 0.5, 60.0);
    assert_eq!(gated, est);
}

proptest! {
    #[test]
    fn projection_round_trips(
        x in 0.5f64..4.0, y in -1.0f64..1.0, z in 0.2f64..1.8,
        yaw in -3.1f64..3.1,
    ) {
        let cam = CameraModel::from_fov(96, 72, 90.0, 70.0, 5.0).with_body_pose(&Vec3::new(0.0, 0.0, 1.0), yaw);
        let (c, s) = (yaw.cos(), yaw.sin());
        let p = Vec3::new(c * x - s * y, s * x + c * y, z);
        let (u, v, depth) = cam.project(&p).unwrap();
        prop_assert!((depth - x).abs() < 1e-9);
        prop_assert!((cam.back_project(u, v, depth) - p).norm() < 1e-9);
    }
}
