use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Duration;

use proptest::prelude::*;
use scenebridge::codec::ByteImage;
use scenebridge::fixture::FixtureMode;
use scenebridge::geometry::{Mat4, Vec3};
use scenebridge::harness::*;
use scenebridge::scene::{Scene, TransformNode};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn device_target_equal_to_pose_stays() {
    let p = Mat4::from_axis_angle(Vec3::new(1.0, 1.0, 0.0), 0.4).unwrap().with_translation(Vec3::new(1.0, 2.0, 3.0));
    let mut d = SimDevice::new(p);
    d.target = Some(p);
    for _ in 0..5 {
        assert!(sim_device_step(&mut d, 0.01).unwrap().max_abs_diff(&p) < 1e-15);
    }
    assert!(sim_device_step(&mut d, 0.0).is_err());
    assert!(SimDevice::new(p).with_alpha(0.0).is_err());
    assert!(SimDevice::new(p).with_alpha(1.5).is_err());
}

#[test]
fn unit_gain_jumps_to_target() {
    let target = Mat4::from_axis_angle(Vec3::Z, 1.0).unwrap().with_translation(Vec3::new(0.5, 0.0, 0.0));
    let mut d = SimDevice::new(Mat4::IDENTITY).with_alpha(1.0).unwrap();
    d.target = Some(target);
    assert!(sim_device_step(&mut d, 0.01).unwrap().max_abs_diff(&target) < 1e-12);
}

#[test]
fn geometric_convergence() {
    let target = Mat4::translation(1.0, -2.0, 0.5);
    let mut d = SimDevice::new(Mat4::IDENTITY);
    d.target = Some(target);
    let e0 = target.translation_part().norm();
    let mut prev = e0;
    for _ in 0..50 {
        sim_device_step(&mut d, 0.01).unwrap();
        let e = d.pose.translation_part().distance(target.translation_part());
        assert!(e <= prev);
        prev = e;
    }
    assert!((prev / e0 - 0.8f64.powi(50)).abs() < 1e-9 * 0.8f64.powi(50) + 1e-15);
}

#[test]
fn scripted_device_walks_script() {
    let mut d = SimDevice::new(Mat4::IDENTITY);
    d.script = (1..=3).map(|k| Mat4::translation(k as f64, 0.0, 0.0)).collect();
    for k in 1..=3 {
        assert_eq!(sim_device_step(&mut d, 0.01).unwrap(), Mat4::translation(k as f64, 0.0, 0.0));
    }
    assert_eq!(sim_device_step(&mut d, 0.01).unwrap(), Mat4::translation(3.0, 0.0, 0.0));
    assert_eq!(d.steps, 4);
}

#[test]
fn static_capture_gives_identical_poses() {
    let mut s = Scene::new();
    let m = Mat4::translation(0.1, 0.2, 0.3);
    s.add_node(TransformNode::new("tip", "tip").with_matrix(m)).unwrap();
    let plan = capture_pose_array(&mut s, "tip", 0.1, 1.0, |_, _| {}).unwrap();
    assert_eq!(plan.poses.len(), 10);
    assert!(plan.poses.iter().all(|p| *p == m));
    assert!(capture_pose_array(&mut s, "nope", 0.1, 1.0, |_, _| {}).is_err());
}

#[test]
fn circle_capture_lies_on_circle() {
    let mut s = Scene::new();
    s.add_node(TransformNode::new("tip", "tip")).unwrap();
    let r = 0.05;
    let plan = capture_pose_array(&mut s, "tip", 0.1, 3.2, |scene, t| {
        scene.set_matrix("tip", circle_pose(r, 2.0 * PI * t / 3.2)).unwrap();
    })
    .unwrap();
    assert_eq!(plan.poses.len(), 32);
    for (k, p) in plan.poses.iter().enumerate() {
        let t = p.translation_part();
        assert!((t.norm() - r).abs() < 1e-15);
        let a = 2.0 * PI * k as f64 / 32.0;
        assert!(t.distance(Vec3::new(r * a.cos(), r * a.sin(), 0.0)) < 1e-15);
    }
}

#[test]
fn follow_single_waypoint_at_start() {
    let p = Mat4::translation(1.0, 1.0, 1.0);
    let mut d = SimDevice::new(p);
    let plan = TrajectoryPlan {
        poses: vec![p],
        speed: 0.1,
        sample_period: 0.1,
    };
    assert_eq!(follow_trajectory(&mut d, &plan).unwrap(), vec![p]);
}

#[test]
fn follow_two_waypoints_takes_ten_seconds() {
    let mut d = SimDevice::new(Mat4::IDENTITY);
    let plan = TrajectoryPlan {
        poses: vec![Mat4::IDENTITY, Mat4::translation(1.0, 0.0, 0.0)],
        speed: 0.1,
        sample_period: 0.1,
    };
    let trace = follow_trajectory(&mut d, &plan).unwrap();
    let t = (trace.len() - 1) as f64 * plan.sample_period;
    assert!((t - 10.0).abs() <= plan.sample_period + 1e-9, "t = {t}");
    assert_eq!(*trace.last().unwrap(), Mat4::translation(1.0, 0.0, 0.0));
    for w in trace.windows(2) {
        let step = w[0].translation_part().distance(w[1].translation_part());
        assert!(step <= 0.01 + 1e-12);
    }
}

#[test]
fn non_finite_plan_rejected() {
    let mut bad = Mat4::IDENTITY;
    bad.set(0, 3, f64::NAN);
    let plan = TrajectoryPlan {
        poses: vec![bad],
        speed: 0.1,
        sample_period: 0.1,
    };
    assert!(matches!(follow_trajectory(&mut SimDevice::new(Mat4::IDENTITY), &plan), Err(HarnessError::InvalidInput(_))));
    let empty = TrajectoryPlan {
        poses: vec![],
        speed: 0.1,
        sample_period: 0.1,
    };
    assert!(empty.validate().is_err());
}

#[test]
fn deviation_identical_and_offset() {
    let planned: Vec<Vec3> = (0..20).map(|k| Vec3::new(0.01 * k as f64, 0.0, 0.0)).collect();
    let d = path_deviation(&planned, &planned).unwrap();
    assert_eq!((d.mean, d.max), (0.0, 0.0));
    let offset: Vec<Vec3> = planned.iter().map(|p| *p + Vec3::new(0.0, 0.001, 0.0)).collect();
    let d = path_deviation(&planned, &offset).unwrap();
    assert!((d.mean - 0.001).abs() < 1e-15);
    assert!((d.max - 0.001).abs() < 1e-15);
    assert!(path_deviation(&[], &planned).is_err());
}

#[test]
fn relay_demo_tracks_circle() {
    let r = run_relay_demo(0.05, 0.01, 32, 0.1).unwrap();
    assert_eq!(r.pose_array_messages, 1);
    assert_eq!(r.poses_received, 32);
    assert!(r.mean_deviation_mm < 1.0);
    assert!(r.monotone_progress);
    assert!(run_relay_demo(0.05, 0.0, 32, 0.1).is_err());
}

#[test]
fn fixture_demo_latch_and_literal() {
    let latch = run_fixture_demo(&FixtureDemoConfig::unit_sphere(FixtureMode::Latch).unwrap()).unwrap();
    assert_eq!(latch.breach_event_count, 2);
    assert_eq!(latch.null_wrenches_published as usize, latch.outside_steps);
    assert_eq!(latch.servo_published as usize, latch.inside_steps);
    assert!(latch.hold_error_max_mm < 1.0);
    assert!(latch.depth_after_entry_mm >= 50.0 - 1e-6);
    let literal = run_fixture_demo(&FixtureDemoConfig::unit_sphere(FixtureMode::Literal).unwrap()).unwrap();
    assert_eq!(literal.breach_event_count, 2);
    assert_eq!(literal.servo_published as usize, literal.inside_steps);
    assert!(literal.hold_error_max_mm < 1.0);
}

#[test]
fn in_process_latency_is_sub_millisecond() {
    let r = bench_latency_in_process(100).unwrap();
    assert_eq!((r.sent, r.received, r.lost), (100, 100, 0));
    assert!(r.tof_ns.iter().all(|t| *t > 0));
    assert!(r.mean_ms < 1.0, "{}", r.mean_ms);
}

#[test]
fn threaded_latency_is_about_half_the_period() {
    let t = Duration::from_millis(20);
    let r = bench_latency_threads(t, t, 100, 1).unwrap();
    assert_eq!(r.lost, 0);
    assert_eq!(r.received + r.lost, r.sent);
    assert!(r.tof_ns.iter().all(|t| *t > 0));
    assert!(r.mean_ms >= 5.0 && r.mean_ms <= 15.0, "{}", r.mean_ms);
}

#[test]
fn idle_spin_is_cheaper_than_robot_spin() {
    let urdf = std::fs::read_to_string(fixtures().join("six_link_arm.urdf")).unwrap();
    let robot = bench_spin(&SpinBenchConfig {
        urdf: Some(urdf),
        cycles: 30,
        min_lookups: 10,
        base_dir: Some(fixtures()),
        ..SpinBenchConfig::default()
    })
    .unwrap();
    let idle = bench_spin(&SpinBenchConfig {
        cycles: 30,
        ..SpinBenchConfig::default()
    })
    .unwrap();
    assert_eq!(robot.robots, 1);
    assert_eq!(robot.links, 6);
    assert!(robot.lookup_nodes >= 10);
    assert_eq!(idle.robots, 0);
    assert_eq!(robot.durations_ms.len(), 30);
    assert!(idle.mean_ms < robot.mean_ms, "idle {} robot {}", idle.mean_ms, robot.mean_ms);
}

#[test]
fn pgm_round_trip() {
    let img = ByteImage {
        height: 2,
        width: 3,
        encoding: "mono8".into(),
        step: 4,
        data: vec![1, 2, 3, 99, 4, 5, 6, 99],
    };
    let path = std::env::temp_dir().join(format!("scenebridge-{}.pgm", std::process::id()));
    write_pgm(&path, &img).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(bytes, b"P5\n3 2\n255\n\x01\x02\x03\x04\x05\x06".to_vec());
    let rgb = ByteImage {
        encoding: "rgb8".into(),
        ..img
    };
    assert!(write_pgm(&path, &rgb).is_err());
}

proptest! {
    #[test]
    fn latency_report_accounting(sent in 0u64..50, tofs in proptest::collection::vec(1i64..50_000_000, 0..50)) {
        let tofs: Vec<i64> = tofs.into_iter().take(sent as usize).collect();
        let r = LatencyReport::new("x", Duration::ZERO, Duration::ZERO, sent, tofs.clone());
        prop_assert_eq!(r.received + r.lost, r.sent);
        if !tofs.is_empty() {
            let mean = tofs.iter().sum::<i64>() as f64 / tofs.len() as f64 / 1e6;
            prop_assert!((r.mean_ms - mean).abs() < 1e-9);
            prop_assert!(r.min_ms <= r.mean_ms && r.mean_ms <= r.max_ms);
        }
    }

    #[test]
    fn device_error_nonincreasing(x in -1.0f64..1.0, y in -1.0f64..1.0, a in -3.0f64..3.0, alpha in 0.05f64..1.0) {
        let target = Mat4::from_axis_angle(Vec3::new(0.2, 0.3, 1.0), a).unwrap().with_translation(Vec3::new(x, y, 0.0));
        let mut d = SimDevice::new(Mat4::IDENTITY).with_alpha(alpha).unwrap();
        d.target = Some(target);
        let mut prev = d.pose.frobenius_distance(&target);
        for _ in 0..20 {
            sim_device_step(&mut d, 0.01).unwrap();
            let e = d.pose.frobenius_distance(&target);
            prop_assert!(e <= prev + 1e-12);
            prev = e;
        }
    }
}
