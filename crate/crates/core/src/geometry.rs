//! Rigid-transform math: vectors, unit quaternions, row-major homogeneous
//! matrices, roll-pitch-yaw and spherical interpolation.
//!
//! Conventions: right-handed frames, column vectors (`p' = M * p`), matrices
//! stored row-major with the translation in the last column. Quaternions are
//! kept in canonical sign (`w >= 0`).

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum norm deviation tolerated for a quaternion handed to
/// [`quat_to_matrix`].
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Tolerance used when deciding whether a matrix is a rigid transform.
pub const RIGID_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction; fails on a (near) zero vector.
    pub fn normalized(self) -> Result<Vec3> {
        let n = self.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(GeometryError::InvalidInput(format!(
                "cannot normalize vector of norm {n}"
            )));
        }
        Ok(self * (1.0 / n))
    }

    pub fn lerp(self, o: Vec3, t: f64) -> Vec3 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rotation quaternion `(x, y, z, w)` with `w` the scalar part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Quaternion::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        w: 1.0,
    };

    /// Normalized, canonical-sign quaternion from raw components.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Result<Self> {
        let q = Quaternion { x, y, z, w };
        let n = q.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(GeometryError::InvalidInput(format!(
                "quaternion norm {n} cannot be normalized"
            )));
        }
        Ok(q.scale(1.0 / n).canonical())
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let a = axis.normalized()?;
        let (s, c) = (angle / 2.0).sin_cos();
        Quaternion::new(a.x * s, a.y * s, a.z * s, c)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z + self.w * o.w
    }

    fn scale(self, s: f64) -> Quaternion {
        Quaternion {
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
            w: self.w * s,
        }
    }

    pub fn negated(self) -> Quaternion {
        self.scale(-1.0)
    }

    /// Same rotation with `w >= 0`. When `w` is exactly zero the first
    /// nonzero vector component is made positive.
    pub fn canonical(self) -> Quaternion {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.x, self.y, self.z]
                .into_iter()
                .find(|c| *c != 0.0)
                .is_some_and(|c| c < 0.0)
        };
        if flip {
            self.negated()
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion {
            x: -self.x,
            y: -self.y,
            z: -self.z,
            w: self.w,
        }
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    /// Rotation angle in `[0, pi]` between two orientations.
    pub fn angle_to(&self, o: &Quaternion) -> f64 {
        let d = self.dot(o).abs().min(1.0);
        2.0 * d.acos()
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.w.is_finite()
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    /// Hamilton product.
    fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }
}

/// 4x4 homogeneous matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat4(pub [f64; 16]);

impl Default for Mat4 {
    fn default() -> Self {
        Mat4::IDENTITY
    }
}

impl Index<(usize, usize)> for Mat4 {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.0[r * 4 + c]
    }
}

impl Mat4 {
    pub const IDENTITY: Mat4 = Mat4([
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ]);

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[r * 4 + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.0[r * 4 + c] = v;
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Mat4 {
        let mut m = Mat4::IDENTITY;
        m.set(0, 3, x);
        m.set(1, 3, y);
        m.set(2, 3, z);
        m
    }

    pub fn from_translation(t: Vec3) -> Mat4 {
        Mat4::translation(t.x, t.y, t.z)
    }

    /// Builds a rigid matrix from a row-major 3x3 rotation block and a
    /// translation.
    pub fn from_rotation_translation(r: [[f64; 3]; 3], t: Vec3) -> Mat4 {
        let mut m = Mat4::IDENTITY;
        for (i, row) in r.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        m.set(0, 3, t.x);
        m.set(1, 3, t.y);
        m.set(2, 3, t.z);
        m
    }

    /// Rigid transform from a unit quaternion and a translation.
    pub fn from_pose(position: Vec3, orientation: Quaternion) -> Result<Mat4> {
        let mut m = quat_to_matrix(orientation)?;
        m.set(0, 3, position.x);
        m.set(1, 3, position.y);
        m.set(2, 3, position.z);
        Ok(m)
    }

    /// Rotation by `angle` radians about `axis` (Rodrigues formula).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Mat4> {
        let k = axis.normalized()?;
        let (s, c) = angle.sin_cos();
        let v = 1.0 - c;
        Ok(Mat4::from_rotation_translation(
            [
                [c + k.x * k.x * v, k.x * k.y * v - k.z * s, k.x * k.z * v + k.y * s],
                [k.y * k.x * v + k.z * s, c + k.y * k.y * v, k.y * k.z * v - k.x * s],
                [k.z * k.x * v - k.y * s, k.z * k.y * v + k.x * s, c + k.z * k.z * v],
            ],
            Vec3::ZERO,
        ))
    }

    pub fn rotation_block(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.get(i, j);
            }
        }
        r
    }

    pub fn translation_part(&self) -> Vec3 {
        Vec3::new(self.get(0, 3), self.get(1, 3), self.get(2, 3))
    }

    pub fn with_translation(mut self, t: Vec3) -> Mat4 {
        self.set(0, 3, t.x);
        self.set(1, 3, t.y);
        self.set(2, 3, t.z);
        self
    }

    /// Rotation-only copy (translation zeroed).
    pub fn rotation_only(self) -> Mat4 {
        self.with_translation(Vec3::ZERO)
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            self.get(0, 0) * p.x + self.get(0, 1) * p.y + self.get(0, 2) * p.z + self.get(0, 3),
            self.get(1, 0) * p.x + self.get(1, 1) * p.y + self.get(1, 2) * p.z + self.get(1, 3),
            self.get(2, 0) * p.x + self.get(2, 1) * p.y + self.get(2, 2) * p.z + self.get(2, 3),
        )
    }

    pub fn transform_vector(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.get(0, 0) * v.x + self.get(0, 1) * v.y + self.get(0, 2) * v.z,
            self.get(1, 0) * v.x + self.get(1, 1) * v.y + self.get(1, 2) * v.z,
            self.get(2, 0) * v.x + self.get(2, 1) * v.y + self.get(2, 2) * v.z,
        )
    }

    pub fn determinant3(&self) -> f64 {
        let r = self.rotation_block();
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Largest absolute entry of `R^T R - I` for the rotation block.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation_block();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let g: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }

    pub fn has_affine_last_row(&self) -> bool {
        self.0[12] == 0.0 && self.0[13] == 0.0 && self.0[14] == 0.0 && self.0[15] == 1.0
    }

    /// Orthonormal rotation block with determinant +1 and an exact
    /// `(0, 0, 0, 1)` last row.
    pub fn is_rigid(&self, tol: f64) -> bool {
        self.0.iter().all(|v| v.is_finite())
            && self.has_affine_last_row()
            && self.orthonormality_error() <= tol
            && (self.determinant3() - 1.0).abs() <= tol
    }

    /// Frobenius norm of the entry-wise difference.
    pub fn frobenius_distance(&self, o: &Mat4) -> f64 {
        self.0
            .iter()
            .zip(o.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, o: &Mat4) -> f64 {
        self.0
            .iter()
            .zip(o.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Mul for Mat4 {
    type Output = Mat4;
    fn mul(self, b: Mat4) -> Mat4 {
        compose(&self, &b)
    }
}

/// `a * b`: applies `b` first, then `a`.
pub fn compose(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = (0..4).map(|k| a.0[r * 4 + k] * b.0[k * 4 + c]).sum();
        }
    }
    Mat4(out)
}

/// Inverse of a homogeneous matrix. Rigid inputs take the transpose fast
/// path; anything else goes through Gauss-Jordan elimination.
pub fn invert(a: &Mat4) -> Result<Mat4> {
    if a.is_rigid(1e-9) {
        let r = a.rotation_block();
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = a.translation_part();
        let mut m = Mat4::from_rotation_translation(rt, Vec3::ZERO);
        let nt = -m.transform_vector(t);
        m = m.with_translation(nt);
        return Ok(m);
    }
    general_inverse(a)
}

fn general_inverse(a: &Mat4) -> Result<Mat4> {
    let mut m = [[0.0f64; 8]; 4];
    for (r, row) in m.iter_mut().enumerate() {
        for c in 0..4 {
            row[c] = a.get(r, c);
        }
        row[4 + r] = 1.0;
    }
    let scale = a.0.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap_or(col);
        if !(m[pivot][col].abs() > 1e-12 * scale) {
            return Err(GeometryError::InvalidInput("singular matrix".into()));
        }
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..4 {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..8 {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    let mut out = Mat4::IDENTITY;
    for (r, row) in m.iter().enumerate() {
        for c in 0..4 {
            out.set(r, c, row[4 + c]);
        }
    }
    Ok(out)
}

/// Rotation-only rigid matrix for a unit quaternion.
pub fn quat_to_matrix(q: Quaternion) -> Result<Mat4> {
    if !q.is_finite() || !q.is_unit(UNIT_TOLERANCE) {
        return Err(GeometryError::InvalidInput(format!(
            "quaternion norm {} is not unit",
            q.norm()
        )));
    }
    let Quaternion { x, y, z, w } = q;
    Ok(Mat4::from_rotation_translation(
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - z * w),
                2.0 * (x * z + y * w),
            ],
            [
                2.0 * (x * y + z * w),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - x * w),
            ],
            [
                2.0 * (x * z - y * w),
                2.0 * (y * z + x * w),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ],
        Vec3::ZERO,
    ))
}

/// Canonical-sign unit quaternion of the rotation block. Picks the largest
/// of the trace and the three diagonal entries as the pivot.
pub fn matrix_to_quat(m: &Mat4) -> Result<Quaternion> {
    if !m.is_finite() || m.orthonormality_error() > RIGID_TOLERANCE {
        return Err(GeometryError::InvalidInput(
            "rotation block is not orthonormal".into(),
        ));
    }
    if (m.determinant3() - 1.0).abs() > RIGID_TOLERANCE {
        return Err(GeometryError::InvalidInput(
            "rotation block is a reflection".into(),
        ));
    }
    let r = m.rotation_block();
    let trace = r[0][0] + r[1][1] + r[2][2];
    let q = if trace >= r[0][0] && trace >= r[1][1] && trace >= r[2][2] {
        let s = (1.0 + trace).sqrt() * 2.0;
        Quaternion {
            w: 0.25 * s,
            x: (r[2][1] - r[1][2]) / s,
            y: (r[0][2] - r[2][0]) / s,
            z: (r[1][0] - r[0][1]) / s,
        }
    } else if r[0][0] >= r[1][1] && r[0][0] >= r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        Quaternion {
            w: (r[2][1] - r[1][2]) / s,
            x: 0.25 * s,
            y: (r[0][1] + r[1][0]) / s,
            z: (r[0][2] + r[2][0]) / s,
        }
    } else if r[1][1] >= r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        Quaternion {
            w: (r[0][2] - r[2][0]) / s,
            x: (r[0][1] + r[1][0]) / s,
            y: 0.25 * s,
            z: (r[1][2] + r[2][1]) / s,
        }
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        Quaternion {
            w: (r[1][0] - r[0][1]) / s,
            x: (r[0][2] + r[2][0]) / s,
            y: (r[1][2] + r[2][1]) / s,
            z: 0.25 * s,
        }
    };
    Quaternion::new(q.x, q.y, q.z, q.w)
}

/// Fixed-axis roll/pitch/yaw: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rpy_to_matrix(roll: f64, pitch: f64, yaw: f64) -> Mat4 {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Mat4::from_rotation_translation(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ],
        Vec3::ZERO,
    )
}

/// Inverse of [`rpy_to_matrix`]; ill-conditioned near `pitch = +-pi/2`.
pub fn matrix_to_rpy(m: &Mat4) -> (f64, f64, f64) {
    let r = m.rotation_block();
    let pitch = (-r[2][0]).clamp(-1.0, 1.0).asin();
    let roll = r[2][1].atan2(r[2][2]);
    let yaw = r[1][0].atan2(r[0][0]);
    (roll, pitch, yaw)
}

/// Shortest-arc spherical interpolation, canonical sign on output.
pub fn slerp(q0: Quaternion, q1: Quaternion, t: f64) -> Result<Quaternion> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::InvalidInput(format!(
            "interpolation parameter {t} outside [0, 1]"
        )));
    }
    let mut q1 = q1;
    let mut d = q0.dot(&q1);
    if d < 0.0 {
        q1 = q1.negated();
        d = -d;
    }
    let (a, b) = if d > 1.0 - 1e-9 {
        (1.0 - t, t)
    } else {
        let theta = d.min(1.0).acos();
        let s = theta.sin();
        (((1.0 - t) * theta).sin() / s, (t * theta).sin() / s)
    };
    Quaternion::new(
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
        a * q0.w + b * q1.w,
    )
}

/// Interpolates two rigid transforms: linear in translation, slerp in
/// rotation.
pub fn interpolate_rigid(a: &Mat4, b: &Mat4, t: f64) -> Result<Mat4> {
    let qa = matrix_to_quat(a)?;
    let qb = matrix_to_quat(b)?;
    let q = slerp(qa, qb, t)?;
    let p = a.translation_part().lerp(b.translation_part(), t);
    Mat4::from_pose(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn identity_quaternion_gives_identity() {
        assert_eq!(quat_to_matrix(Quaternion::IDENTITY).unwrap(), Mat4::IDENTITY);
        assert_eq!(matrix_to_quat(&Mat4::IDENTITY).unwrap(), Quaternion::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let m = quat_to_matrix(Quaternion { x: 0.0, y: 0.0, z: h, w: h }).unwrap();
        // cos 90 = 0, -sin 90 = -1
        assert!((m.get(0, 0)).abs() < 1e-12);
        assert!((m.get(0, 1) + 1.0).abs() < 1e-12);
        assert!((m.get(0, 2)).abs() < 1e-12);
        assert!((m.determinant3() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        let q = Quaternion { x: 0.0, y: 0.0, z: 0.0, w: 1.1 };
        assert!(quat_to_matrix(q).is_err());
    }

    #[test]
    fn half_turn_about_x_uses_diagonal_branch() {
        let m = Mat4::from_rotation_translation(
            [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            Vec3::ZERO,
        );
        let q = matrix_to_quat(&m).unwrap();
        assert_eq!(q, Quaternion { x: 1.0, y: 0.0, z: 0.0, w: 0.0 });
    }

    #[test]
    fn rejects_sheared_matrix() {
        let mut m = Mat4::IDENTITY;
        m.set(0, 1, 0.1);
        assert!(matrix_to_quat(&m).is_err());
    }

    #[test]
    fn rpy_single_axis() {
        assert!(rpy_to_matrix(0.0, 0.0, 0.0).max_abs_diff(&Mat4::IDENTITY) < 1e-15);
        let rx = rpy_to_matrix(FRAC_PI_2, 0.0, 0.0);
        let expect = Mat4::from_rotation_translation(
            [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
            Vec3::ZERO,
        );
        assert!(rx.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let q = Quaternion::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7).unwrap();
        let mid = slerp(q, q, 0.5).unwrap();
        assert!(mid.angle_to(&q) < 1e-9);

        let qz = Quaternion::from_axis_angle(Vec3::Z, FRAC_PI_2).unwrap();
        let half = slerp(Quaternion::IDENTITY, qz, 0.5).unwrap();
        let (s, c) = (FRAC_PI_4 / 2.0).sin_cos();
        assert!((half.z - s).abs() < 1e-12 && (half.w - c).abs() < 1e-12);

        assert!(slerp(q, qz, 1.5).is_err());
        assert!(slerp(q, qz, -0.1).is_err());
    }

    #[test]
    fn slerp_takes_short_arc() {
        let q0 = Quaternion::from_axis_angle(Vec3::X, 0.3).unwrap();
        let r = Quaternion::from_axis_angle(Vec3::Y, 0.4).unwrap();
        let far = (q0 * r).negated();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let s = slerp(q0, far, t).unwrap();
            assert!(q0.angle_to(&s) <= 0.4 + 1e-9);
        }
    }

    #[test]
    fn pure_translation_inverse() {
        let inv = invert(&Mat4::translation(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(inv, Mat4::translation(-1.0, -2.0, -3.0));
        assert_eq!(compose(&Mat4::IDENTITY, &inv), inv);
    }

    #[test]
    fn general_inverse_and_singular() {
        let mut m = Mat4::IDENTITY;
        m.set(0, 0, 2.0);
        m.set(1, 2, 0.5);
        let inv = invert(&m).unwrap();
        assert!(compose(&m, &inv).max_abs_diff(&Mat4::IDENTITY) < 1e-12);

        let mut s = Mat4::IDENTITY;
        s.set(2, 2, 0.0);
        assert!(invert(&s).is_err());
    }

    #[test]
    fn canonical_sign_rule() {
        let q = Quaternion::new(0.0, -1.0, 0.0, 0.0).unwrap();
        assert_eq!(q, Quaternion { x: 0.0, y: 1.0, z: 0.0, w: 0.0 });
        let q = Quaternion::new(0.1, 0.0, 0.0, -0.9).unwrap();
        assert!(q.w > 0.0 && q.x < 0.0);
    }

    #[test]
    fn rotate_matches_matrix() {
        let q = Quaternion::from_axis_angle(Vec3::new(0.3, -1.0, 0.2), 2.0).unwrap();
        let p = Vec3::new(0.5, -2.0, 1.5);
        let a = q.rotate(p);
        let b = quat_to_matrix(q).unwrap().transform_point(p);
        assert!(a.distance(b) < 1e-12);
    }
}
