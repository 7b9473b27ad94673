use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenebridge::bus::{BridgeNode, Context};
use scenebridge::codec::{SceneValue, TypeTag};
use scenebridge::fixture::*;
use scenebridge::geometry::{Mat4, Quaternion, Vec3};
use scenebridge::robot::{tessellate, Geometry};
use scenebridge::scene::MeshData;

fn unit_sphere() -> MeshData {
    tessellate(&Geometry::Sphere { radius: 1.0 }).unwrap()
}

fn cube(half: Vec3) -> MeshData {
    tessellate(&Geometry::Box { size: half * 2.0 }).unwrap()
}

/// Largest circumradius over all facets.
fn max_circumradius(mesh: &MeshData) -> f64 {
    let mut worst: f64 = 0.0;
    for [a, b, c] in mesh.triangles_iter() {
        let (ab, ac) = (b - a, c - a);
        let n = ab.cross(ac).norm();
        worst = worst.max(ab.norm() * ac.norm() * (c - b).norm() / (2.0 * n));
    }
    worst
}

/// Largest angle any mesh edge subtends at the origin.
fn max_edge_angle(mesh: &MeshData) -> f64 {
    let mut worst: f64 = 0.0;
    for [a, b, c] in mesh.triangles_iter() {
        for (u, v) in [(a, b), (b, c), (c, a)] {
            let cos = u.dot(v) / (u.norm() * v.norm());
            worst = worst.max(cos.clamp(-1.0, 1.0).acos());
        }
    }
    worst
}

/// Distance from `p` to the surface of the axis-aligned box centred at the origin.
fn box_distance(p: Vec3, h: Vec3) -> f64 {
    let q = Vec3::new(p.x.abs() - h.x, p.y.abs() - h.y, p.z.abs() - h.z);
    let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside.abs()
}

fn random_rigid(rng: &mut impl Rng) -> Mat4 {
    let q = loop {
        if let Ok(q) = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ) {
            break q;
        }
    };
    let t = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    Mat4::from_pose(t, q).unwrap()
}

#[test]
fn sphere_center_distance_band() {
    let s = unit_sphere();
    // vertices lie on the unit sphere, so each facet plane sits at sqrt(1 - R^2)
    let r = max_circumradius(&s);
    let (d, q) = point_mesh_distance(Vec3::ZERO, &s).unwrap();
    assert!(d >= (1.0 - r * r).sqrt() - 1e-12 && d <= 1.0, "d = {d}, r = {r}");
    let delta = std::f64::consts::PI / 16.0;
    assert!(d < (delta / 2.0).cos());
    assert!((q.norm() - d).abs() < 1e-12);
}

#[test]
fn box_distance_matches_analytic() {
    let h = Vec3::new(0.5, 0.3, 0.8);
    let m = cube(h);
    assert_eq!(m.triangles.len(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        let p = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let (d, q) = point_mesh_distance(p, &m).unwrap();
        assert!((d - box_distance(p, h)).abs() < 1e-9, "{p:?}");
        assert!((q.distance(p) - d).abs() < 1e-12);
    }
}

#[test]
fn closest_point_cases() {
    let (a, b, c) = (Vec3::ZERO, Vec3::X, Vec3::Y);
    assert_eq!(closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.0), a, b, c), a);
    assert_eq!(closest_point_on_triangle(Vec3::new(2.0, -0.5, 0.0), a, b, c), b);
    assert_eq!(closest_point_on_triangle(Vec3::new(0.5, -1.0, 3.0), a, b, c), Vec3::new(0.5, 0.0, 0.0));
    assert!(closest_point_on_triangle(Vec3::new(0.2, 0.2, 5.0), a, b, c).distance(Vec3::new(0.2, 0.2, 0.0)) < 1e-15);
    let h = closest_point_on_triangle(Vec3::new(1.0, 1.0, 0.0), a, b, c);
    assert!(h.distance(Vec3::new(0.5, 0.5, 0.0)) < 1e-15);
}

#[test]
fn sphere_parity_outside_exclusion_band() {
    let s = unit_sphere();
    let chord = 2.0 * (max_edge_angle(&s) / 2.0).sin();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..1000 {
        let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let r = p.norm();
        if (r - 1.0).abs() < chord {
            continue;
        }
        assert_eq!(is_inside(p, &s).unwrap(), r < 1.0, "{p:?}");
        checked += 1;
    }
    assert!(checked > 700);
}

#[test]
fn grazing_ray_is_retried() {
    // +x from here passes exactly through a box edge
    let m = cube(Vec3::new(0.5, 0.5, 0.5));
    assert!(is_inside(Vec3::new(0.0, 0.5 - 1e-12, 0.5 - 1e-12), &m).unwrap());
    assert!(!is_inside(Vec3::new(-1.0, 0.5, 0.5 + 1e-3), &m).unwrap());
}

#[test]
fn linear_path_through_sphere_crosses_twice() {
    let s = unit_sphere();
    let mut st = BreachWarningState::new("tool", s).unwrap();
    let (a, b) = (Vec3::new(-2.0, 0.1, 0.05), Vec3::new(2.0, 0.1, 0.05));
    let mut events = Vec::new();
    let n = 400;
    for k in 0..=n {
        let p = a.lerp(b, k as f64 / n as f64);
        let e = update_breach(&mut st, p, k).unwrap();
        assert_eq!(st.inside, st.signed_distance < 0.0);
        assert!((st.signed_distance.abs() - point_mesh_distance(p, &st.surface).unwrap().0).abs() < 1e-15);
        if e != BreachEvent::None {
            events.push((e, k));
        }
    }
    let kinds: Vec<BreachEvent> = events.iter().map(|e| e.0).collect();
    assert_eq!(kinds, vec![BreachEvent::Entered, BreachEvent::Exited]);
    // crossings near |p| = 1 along the line
    let x_cross = (1.0f64 - 0.1 * 0.1 - 0.05 * 0.05).sqrt();
    let step = 4.0 / n as f64;
    let x_in = -2.0 + events[0].1 as f64 * step;
    let x_out = -2.0 + events[1].1 as f64 * step;
    assert!((x_in + x_cross).abs() < 0.05 + step);
    assert!((x_out - x_cross).abs() < 0.05 + step);
}

struct Rig {
    _ctx: Context,
    bridge: BridgeNode,
    device: BridgeNode,
    ctrl: FixtureController,
    servo: scenebridge::bus::Subscriber,
    wrench: scenebridge::bus::Subscriber,
}

fn rig(mode: FixtureMode) -> Rig {
    let ctx = Context::new();
    let mut bridge = BridgeNode::new(&ctx, "bridge", Duration::from_millis(20)).unwrap();
    let mut device = BridgeNode::new(&ctx, "device", Duration::from_millis(20)).unwrap();
    let s1 = bridge.create_subscriber(TypeTag::PoseStamped, "/measured_cp").unwrap();
    let p1 = bridge.create_publisher(TypeTag::PoseStamped, "/servo_cp").unwrap();
    let p2 = bridge.create_publisher(TypeTag::WrenchStamped, "/body/servo_cf").unwrap();
    let servo = device.create_subscriber(TypeTag::PoseStamped, "/servo_cp").unwrap();
    let wrench = device.create_subscriber(TypeTag::WrenchStamped, "/body/servo_cf").unwrap();
    Rig {
        _ctx: ctx,
        bridge,
        device,
        ctrl: FixtureController::new(s1, p1, p2, mode),
        servo,
        wrench,
    }
}

#[test]
fn outside_publishes_null_wrench_only() {
    let mut r = rig(FixtureMode::Latch);
    let st = BreachWarningState::new("tool", unit_sphere()).unwrap();
    let a = fixture_step(&mut r.ctrl, &st, Mat4::translation(3.0, 0.0, 0.0)).unwrap();
    assert_eq!(a, FixtureAction::NullWrench);
    r.device.spin_once();
    assert_eq!(r.wrench.latest_scene_value(), Some(SceneValue::DoubleArray(vec![0.0; 6])));
    assert_eq!(r.servo.received_count(), 0);
    assert_eq!(r.ctrl.latched_pose, None);
}

#[test]
fn literal_mode_republishes_measured() {
    let mut r = rig(FixtureMode::Literal);
    let mut st = BreachWarningState::new("tool", unit_sphere()).unwrap();
    update_breach(&mut st, Vec3::ZERO, 0).unwrap();
    for k in 0..3 {
        let m = Mat4::translation(0.1 * k as f64, 0.0, 0.0);
        assert_eq!(fixture_step(&mut r.ctrl, &st, m).unwrap(), FixtureAction::Servo(m));
        r.device.spin_once();
        assert_eq!(r.servo.latest_scene_value(), Some(SceneValue::Matrix(m)));
    }
    assert_eq!(r.wrench.received_count(), 0);
}

#[test]
fn latch_enter_stay_exit() {
    let mut r = rig(FixtureMode::Latch);
    let mut st = BreachWarningState::new("tool", unit_sphere()).unwrap();
    let entry = Mat4::translation(0.2, 0.0, 0.0);
    update_breach(&mut st, Vec3::ZERO, 0).unwrap();
    let mut servo_values = Vec::new();
    for k in 0..5 {
        let measured = Mat4::translation(0.2 + 0.05 * k as f64, 0.0, 0.0);
        fixture_step(&mut r.ctrl, &st, measured).unwrap();
        assert!(r.ctrl.latched_pose.is_some());
        r.device.spin_once();
        servo_values.push(r.servo.latest_scene_value());
    }
    assert!(servo_values.iter().all(|v| *v == Some(SceneValue::Matrix(entry))));
    update_breach(&mut st, Vec3::new(3.0, 0.0, 0.0), 1).unwrap();
    assert_eq!(fixture_step(&mut r.ctrl, &st, Mat4::IDENTITY).unwrap(), FixtureAction::NullWrench);
    assert_eq!(r.ctrl.latched_pose, None);
    r.device.spin_once();
    assert_eq!(r.servo.received_count(), 5);
    assert_eq!(r.wrench.received_count(), 1);
    r.bridge.spin_once();
}

proptest! {
    #[test]
    fn inside_invariant_under_rigid_motion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_rigid(&mut rng);
        let sphere = unit_sphere();
        let moved = sphere.transformed(&m);
        let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let (d, _) = point_mesh_distance(p, &sphere).unwrap();
        prop_assume!(d > 1e-6);
        prop_assert_eq!(is_inside(p, &sphere).unwrap(), is_inside(m.transform_point(p), &moved).unwrap());
        let (d2, _) = point_mesh_distance(m.transform_point(p), &moved).unwrap();
        prop_assert!((d - d2).abs() < 1e-9);
    }

    #[test]
    fn distance_is_brute_force_minimum(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let mesh = tessellate(&Geometry::Cylinder { radius: 0.4, length: 1.2 }).unwrap();
        let p = Vec3::new(x, y, z);
        let brute = mesh
            .triangles_iter()
            .map(|[a, b, c]| closest_point_on_triangle(p, a, b, c).distance(p))
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(point_mesh_distance(p, &mesh).unwrap().0, brute);
    }

    #[test]
    fn one_publication_per_step(path in proptest::collection::vec(any::<bool>(), 1..30)) {
        let mut r = rig(FixtureMode::Latch);
        let mut st = BreachWarningState::new("tool", unit_sphere()).unwrap();
        let mut latched: Option<Mat4> = None;
        for (k, inside) in path.iter().enumerate() {
            let p = if *inside { Vec3::ZERO } else { Vec3::new(3.0, 0.0, 0.0) };
            update_breach(&mut st, p, k as i64).unwrap();
            let before = r.ctrl.p1.publish_count() + r.ctrl.p2.publish_count();
            let a = fixture_step(&mut r.ctrl, &st, Mat4::translation(k as f64, 0.0, 0.0)).unwrap();
            prop_assert_eq!(r.ctrl.p1.publish_count() + r.ctrl.p2.publish_count(), before + 1);
            prop_assert_eq!(r.ctrl.latched_pose.is_some(), *inside);
            if *inside {
                let held = *latched.get_or_insert(r.ctrl.latched_pose.unwrap());
                prop_assert_eq!(a, FixtureAction::Servo(held));
            } else {
                latched = None;
            }
        }
    }
}
