use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenebridge::geometry::*;

/// R = I + sin(a) K + (1 - cos(a)) K^2, built without the library.
fn rodrigues(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let mut k2 = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k2[i][j] = (0..3).map(|m| k[i][m] * k[m][j]).sum();
        }
    }
    let (s, c) = angle.sin_cos();
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + s * k[i][j] + (1.0 - c) * k2[i][j];
        }
    }
    r
}

fn mat3_of(m: &Mat4) -> [[f64; 3]; 3] {
    m.rotation_block()
}

fn mat3_mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    r
}

fn frob3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s.sqrt()
}

fn random_axis(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return a;
        }
    }
}

fn rx(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn ry(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rz(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[test]
fn quarter_turn_about_z_first_row() {
    let h = 0.5f64.sqrt();
    let m = quat_to_matrix(Quaternion::new(0.0, 0.0, h, h).unwrap()).unwrap();
    // 1 - 2(y^2 + z^2), 2(xy - zw), 2(xz + yw)
    let row = [1.0 - 2.0 * h * h, -2.0 * h * h, 0.0];
    for c in 0..3 {
        assert!((m.get(0, c) - row[c]).abs() < 1e-12);
    }
    assert!((m.determinant3() - 1.0).abs() < 1e-12);
}

#[test]
fn identity_cases() {
    assert_eq!(quat_to_matrix(Quaternion::IDENTITY).unwrap(), Mat4::IDENTITY);
    let q = matrix_to_quat(&Mat4::IDENTITY).unwrap();
    assert_eq!((q.x, q.y, q.z, q.w), (0.0, 0.0, 0.0, 1.0));
    assert_eq!(rpy_to_matrix(0.0, 0.0, 0.0), Mat4::IDENTITY);
}

#[test]
fn half_turn_about_x_uses_diagonal_branch() {
    let mut m = Mat4::IDENTITY;
    let r = rodrigues([1.0, 0.0, 0.0], PI);
    for i in 0..3 {
        for j in 0..3 {
            m.set(i, j, r[i][j]);
        }
    }
    let q = matrix_to_quat(&m).unwrap();
    assert!((q.x - 1.0).abs() < 1e-12 && q.y.abs() < 1e-12 && q.z.abs() < 1e-12 && q.w.abs() < 1e-12);
}

#[test]
fn non_unit_and_non_orthonormal_rejected() {
    let q = Quaternion { x: 0.0, y: 0.0, z: 0.0, w: 2.0 };
    assert!(quat_to_matrix(q).is_err());
    let mut m = Mat4::IDENTITY;
    m.set(0, 0, 1.5);
    assert!(matrix_to_quat(&m).is_err());
}

#[test]
fn quat_matrix_round_trip_against_rodrigues() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let axis = random_axis(&mut rng);
        let angle = rng.gen_range(-PI..PI);
        let oracle = rodrigues(axis, angle);
        let q = matrix_to_quat(&Mat4::from_rotation_translation(oracle, Vec3::ZERO)).unwrap();
        assert!(q.w >= 0.0);
        let back = quat_to_matrix(q).unwrap();
        assert!(frob3(mat3_of(&back), oracle) < 1e-9);
        assert!(back.orthonormality_error() < 1e-9);
        let again = matrix_to_quat(&back).unwrap();
        assert!((again.x - q.x).abs() < 1e-9 && (again.w - q.w).abs() < 1e-9);
    }
}

#[test]
fn axis_angle_matches_rodrigues() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let axis = random_axis(&mut rng);
        let angle = rng.gen_range(-PI..PI);
        let m = Mat4::from_axis_angle(Vec3::from_array(axis), angle).unwrap();
        assert!(frob3(mat3_of(&m), rodrigues(axis, angle)) < 1e-12);
    }
}

#[test]
fn rpy_single_axis_and_composition() {
    assert!(frob3(mat3_of(&rpy_to_matrix(FRAC_PI_2, 0.0, 0.0)), rx(FRAC_PI_2)) < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..500 {
        let (r, p, y) = (rng.gen_range(-PI..PI), rng.gen_range(-1.5..1.5), rng.gen_range(-PI..PI));
        let oracle = mat3_mul(mat3_mul(rz(y), ry(p)), rx(r));
        let m = rpy_to_matrix(r, p, y);
        assert!(frob3(mat3_of(&m), oracle) < 1e-12);
        let (r2, p2, y2) = matrix_to_rpy(&m);
        assert!(rpy_to_matrix(r2, p2, y2).max_abs_diff(&m) < 1e-9);
    }
}

#[test]
fn slerp_half_of_quarter_turn() {
    let q1 = Quaternion::from_axis_angle(Vec3::Z, FRAC_PI_2).unwrap();
    let mid = slerp(Quaternion::IDENTITY, q1, 0.5).unwrap();
    // half angle pi/8
    let want = ((PI / 8.0).sin(), (PI / 8.0).cos());
    assert!(mid.x.abs() < 1e-12 && mid.y.abs() < 1e-12);
    assert!((mid.z - want.0).abs() < 1e-12 && (mid.w - want.1).abs() < 1e-12);
    assert!(slerp(q1, q1, 0.5).unwrap().angle_to(&q1) < 1e-12);
    assert!(slerp(q1, q1, 1.5).is_err());
    assert!(slerp(q1, q1, -0.1).is_err());
}

#[test]
fn slerp_takes_short_arc() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let q0 = Quaternion::from_axis_angle(Vec3::from_array(random_axis(&mut rng)), rng.gen_range(0.0..PI)).unwrap();
        let r = Quaternion::from_axis_angle(Vec3::from_array(random_axis(&mut rng)), rng.gen_range(0.0..3.0)).unwrap();
        let far = (q0 * r).negated();
        let full = q0.angle_to(&far);
        for t in [0.1, 0.5, 0.9] {
            let s = slerp(q0, far, t).unwrap();
            assert!(q0.angle_to(&s) <= full + 1e-9);
        }
    }
}

#[test]
fn compose_invert() {
    assert_eq!(invert(&Mat4::translation(1.0, 2.0, 3.0)).unwrap(), Mat4::translation(-1.0, -2.0, -3.0));
    let m = Mat4::translation(4.0, 5.0, 6.0);
    assert_eq!(compose(&Mat4::IDENTITY, &m), m);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..1000 {
        let r = rodrigues(random_axis(&mut rng), rng.gen_range(-PI..PI));
        let t = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let m = Mat4::from_rotation_translation(r, t);
        assert!(compose(&m, &invert(&m).unwrap()).max_abs_diff(&Mat4::IDENTITY) < 1e-9);
    }
    let mut singular = Mat4::IDENTITY;
    singular.set(2, 2, 0.0);
    assert!(invert(&singular).is_err());
}

fn unit_quat() -> impl Strategy<Value = Quaternion> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("norm", |(x, y, z, w)| x * x + y * y + z * z + w * w > 0.01)
        .prop_map(|(x, y, z, w)| Quaternion::new(x, y, z, w).unwrap())
}

proptest! {
    #[test]
    fn quaternions_are_canonical_unit(q in unit_quat()) {
        prop_assert!((q.norm() - 1.0).abs() < 1e-9);
        prop_assert!(q.w >= 0.0);
    }

    #[test]
    fn quat_round_trip(q in unit_quat()) {
        let back = matrix_to_quat(&quat_to_matrix(q).unwrap()).unwrap();
        prop_assert!((back.x - q.x).abs() < 1e-9 && (back.y - q.y).abs() < 1e-9);
        prop_assert!((back.z - q.z).abs() < 1e-9 && (back.w - q.w).abs() < 1e-9);
    }

    #[test]
    fn slerp_constant_angular_velocity(q0 in unit_quat(), q1 in unit_quat(), t in 0.0f64..=1.0) {
        let total = q0.angle_to(&q1);
        let s = slerp(q0, q1, t).unwrap();
        prop_assert!((q0.angle_to(&s) - t * total).abs() < 1e-9);
    }

    #[test]
    fn rpy_round_trip(r in -3.0f64..3.0, p in -1.5f64..1.5, y in -3.0f64..3.0) {
        let m = rpy_to_matrix(r, p, y);
        let (r2, p2, y2) = matrix_to_rpy(&m);
        prop_assert!(rpy_to_matrix(r2, p2, y2).max_abs_diff(&m) < 1e-9);
    }

    #[test]
    fn rigid_matrices_have_affine_row(q in unit_quat(), x in -10.0f64..10.0) {
        let m = Mat4::from_pose(Vec3::new(x, -x, 0.5), q).unwrap();
        prop_assert!(m.has_affine_last_row());
        prop_assert!(m.orthonormality_error() < 1e-9);
        prop_assert!((m.determinant3() - 1.0).abs() < 1e-9);
    }
}
