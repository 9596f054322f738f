mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swarmplan::{BSplineTrajectory, Vec3};

use common::{cox_de_boor, random_trajectory};

#[test]
fn matrix_form_matches_cox_de_boor_for_each_degree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for degree in 1..=5 {
        for _ in 0..20 {
            let n = rng.gen_range(degree + 1..degree + 15);
            let traj = random_trajectory(&mut rng, degree, n, 5.0);
            let (t0, t1) = traj.domain();
            for _ in 0..25 {
                let t = rng.gen_range(t0..t1);
                let err = (traj.evaluate(t).unwrap() - cox_de_boor(&traj, t)).norm();
                assert!(err < 1e-9, "degree {degree}: error {err} at t = {t}");
            }
        }
    }
}

#[test]
fn derivative_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let traj = random_trajectory(&mut rng, 3, 12, 3.0);
        let vel = traj.derivative().unwrap();
        let (t0, t1) = traj.domain();
        let h = 1e-6;
        for _ in 0..10 {
            let t = rng.gen_range(t0 + 1e-3..t1 - 1e-3);
            let fd = (traj.evaluate(t + h).unwrap() - traj.evaluate(t - h).unwrap()) / (2.0 * h);
            let an = vel.evaluate(t).unwrap();
            assert!((fd - an).norm() <= 1e-5 * (1.0 + an.norm()), "{fd} vs {an}");
        }
    }
}

#[test]
fn arc_length_of_straight_line() {
    let ctrl: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
    let traj = BSplineTrajectory::new(3, ctrl, 0.5, 0.0).unwrap();
    let (t0, t1) = traj.domain();
    let chord = (traj.evaluate(t1).unwrap() - traj.evaluate(t0).unwrap()).norm();
    assert!((traj.arc_length(1000) - chord).abs() < 1e-6);
}

fn trajectory_strategy() -> impl Strategy<Value = BSplineTrajectory> {
    (1usize..=4, 0usize..10, 0.05f64..2.0, -50.0f64..50.0).prop_flat_map(|(degree, extra, dt, start)| {
        prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), degree + 1 + extra).prop_map(move |pts| {
            let ctrl = pts.into_iter().map(Vec3::from).collect();
            BSplineTrajectory::new(degree, ctrl, dt, start).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn basis_weights_form_a_partition_of_unity(traj in trajectory_strategy(), frac in 0.0f64..=1.0) {
        let (t0, t1) = traj.domain();
        let (first, w) = traj.basis_weights(t0 + frac * (t1 - t0)).unwrap();
        prop_assert!(first + w.len() <= traj.control_points().len());
        prop_assert!(w.iter().all(|&x| x >= -1e-12));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn points_lie_in_the_hull_of_active_control_points(traj in trajectory_strategy(), frac in 0.0f64..=1.0) {
        let (t0, t1) = traj.domain();
        let t = t0 + frac * (t1 - t0);
        let p = traj.evaluate(t).unwrap();
        let (first, w) = traj.basis_weights(t).unwrap();
        let active = &traj.control_points()[first..first + w.len()];
        for k in 0..3 {
            let lo = active.iter().map(|q| q[k]).fold(f64::INFINITY, f64::min);
            let hi = active.iter().map(|q| q[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p[k] >= lo - 1e-9 && p[k] <= hi + 1e-9);
        }
    }

    #[test]
    fn translation_commutes_with_evaluation(
        traj in trajectory_strategy(),
        frac in 0.0f64..=1.0,
        offset in prop::array::uniform3(-10.0f64..10.0),
    ) {
        let offset = Vec3::from(offset);
        let (t0, t1) = traj.domain();
        let t = t0 + frac * (t1 - t0);
        let moved = traj.translated(&offset);
        prop_assert!((moved.evaluate(t).unwrap() - traj.evaluate(t).unwrap() - offset).norm() < 1e-9);
    }

    #[test]
    fn clamped_evaluation_holds_end_points(traj in trajectory_strategy(), beyond in 0.0f64..100.0) {
        let (t0, t1) = traj.domain();
        prop_assert_eq!(traj.evaluate_clamped(t1 + beyond), traj.evaluate(t1).unwrap());
        prop_assert_eq!(traj.evaluate_clamped(t0 - beyond), traj.evaluate(t0).unwrap());
        prop_assert!(traj.evaluate(t1 + beyond + 1e-6).is_err());
    }
}
