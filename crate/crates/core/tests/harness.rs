use swarmplan::harness::{
    circle_swap, collision_audit, density_scenario, generate_forest, read_trace, run_scenario, write_trace, AgentSpec,
    CollisionKind, ForestSpec, Scenario, TraceRow,
};
use swarmplan::{AgentId, Vec3};

fn single_agent(length: f64) -> Scenario {
    Scenario {
        name: "single".into(),
        duration: 20.0,
        bounds_min: [-3.0, -3.0, 0.0],
        bounds_max: [length + 3.0, 3.0, 3.0],
        agents: vec![AgentSpec {
            start: [0.0, 0.0, 1.0],
            goal: [length, 0.0, 1.0],
            yaw: None,
        }],
        ..Scenario::default()
    }
}

fn row(clock: f64, id: AgentId, p: Vec3) -> TraceRow {
    TraceRow {
        clock,
        id,
        true_position: p,
        yaw: 0.0,
        believed_position: p,
        epoch: 0,
        reason: None,
        wall_ms: None,
    }
}

#[test]
fn single_agent_flies_nearly_straight() {
    let out = run_scenario(&single_agent(10.0)).unwrap();
    let m = &out.metrics.agents[0];
    assert!(m.completed());
    assert!((10.0..=10.5).contains(&m.d_fly), "d_fly {}", m.d_fly);
    assert!((m.straight_line - 10.0).abs() < 1e-9);
    assert_eq!(out.metrics.collisions, 0);
    let last = out.trace.last().unwrap();
    assert!((last.true_position - Vec3::new(10.0, 0.0, 1.0)).norm() < 0.3);
}

#[test]
fn audit_counts_each_contiguous_violation_once() {
    let mut trace = Vec::new();
    for k in 0..30 {
        let t = k as f64 * 0.1;
        // Agents 0 and 1 overlap during [0.5, 0.9] and again at 2.0.
        let gap = if (5..10).contains(&k) || k == 20 { 0.3 } else { 1.0 };
        trace.push(row(t, 0, Vec3::new(0.0, 0.0, 1.0)));
        trace.push(row(t, 1, Vec3::new(gap, 0.0, 1.0)));
        trace.push(row(t, 2, Vec3::new(5.0, 0.0, 1.0)));
    }
    let report = collision_audit(&trace, None, 0.2);
    assert_eq!(report.count(), 2);
    let first = &report.events[0];
    assert_eq!(first.kind, CollisionKind::Agents(0, 1));
    assert!((first.start - 0.5).abs() < 1e-9 && (first.end - 0.9).abs() < 1e-9);
    assert!((first.min_distance - 0.3).abs() < 1e-12);
}

#[test]
fn audit_reports_obstacle_contact() {
    let s = single_agent(4.0);
    let mut world = s.build_world().unwrap();
    world.add_box(Vec3::new(1.9, -0.5, 0.0), Vec3::new(2.1, 0.5, 3.0));
    let trace: Vec<TraceRow> = (0..=40).map(|k| row(k as f64 * 0.1, 0, Vec3::new(k as f64 * 0.1, 0.0, 1.0))).collect();
    let report = collision_audit(&trace, Some(&world), 0.2);
    assert_eq!(report.count(), 1);
    assert_eq!(report.events[0].kind, CollisionKind::Obstacle(0));
}

#[test]
fn trace_round_trips_through_csv() {
    let mut s = circle_swap(4, 3.0);
    s.duration = 1.0;
    let out = run_scenario(&s).unwrap();
    let mut buf = Vec::new();
    write_trace(&out.trace, &mut buf).unwrap();
    let back = read_trace(buf.as_slice()).unwrap();
    assert_eq!(back.len(), out.trace.len());
    for (a, b) in back.iter().zip(&out.trace) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.reason, b.reason);
        assert!((a.clock - b.clock).abs() < 1e-6);
        assert!((a.true_position - b.true_position).norm() < 1e-5);
    }
    let mut again = Vec::new();
    write_trace(&back, &mut again).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn scenario_round_trips_through_toml() {
    let s = density_scenario(0.28, 5);
    let text = toml::to_string(&s).unwrap();
    assert_eq!(Scenario::from_toml(&text).unwrap(), s);
    let partial = Scenario::from_toml("name = \"x\"\nduration = 3.0\n").unwrap();
    assert_eq!(partial.duration, 3.0);
    assert_eq!(partial.step, Scenario::default().step);
}

#[test]
fn forest_has_exact_count_and_spacing() {
    let spec = ForestSpec {
        density: 0.2,
        region_min: [-10.0, -5.0],
        region_max: [10.0, 5.0],
        ..ForestSpec::default()
    };
    let keep = [[-10.0, 0.0], [10.0, 0.0]];
    let pillars = generate_forest(&spec, &keep, 4).unwrap();
    assert_eq!(pillars.len(), 40);
    for (i, a) in pillars.iter().enumerate() {
        for k in &keep {
            assert!(((a[0] - k[0]).powi(2) + (a[1] - k[1]).powi(2)).sqrt() >= spec.keep_out);
        }
        for b in &pillars[i + 1..] {
            assert!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= spec.min_spacing);
        }
    }
    assert_eq!(generate_forest(&spec, &keep, 4).unwrap(), pillars);
    let crowded = ForestSpec {
        density: 5.0,
        ..spec
    };
    assert!(generate_forest(&crowded, &keep, 4).is_err());
}

#[test]
fn outputs_are_written_to_a_directory() {
    let mut s = circle_swap(3, 2.0);
    s.duration = 1.0;
    let out = run_scenario(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();
    for name in ["metrics.csv", "trace.csv", "network.csv", "replans.csv", "timing.csv", "world.grid"] {
        let meta = std::fs::metadata(dir.path().join(name)).unwrap();
        assert!(meta.len() > 0, "{name} is empty");
    }
}

#[test]
fn agents_start_in_their_believed_frame() {
    let mut s = single_agent(6.0);
    s.drift = vec![swarmplan::harness::DriftInjection {
        agent: 0,
        from: 0.0,
        offset: [0.0, 0.5, 0.0],
    }];
    s.duration = 0.5;
    let out = run_scenario(&s).unwrap();
    let first = &out.trace[0];
    assert!((first.true_position - Vec3::new(0.0, 0.0, 1.0)).norm() < 0.05);
    assert!((first.believed_position - first.true_position - Vec3::new(0.0, 0.5, 0.0)).norm() < 1e-9);
}
