//! Forbidden-region virtual fixture: point-to-mesh distance, inside test,
//! breach tracking and the hold-in-place controller.

use serde::Serialize;
use thiserror::Error;

use crate::bus::{BusError, Publisher, Subscriber};
use crate::codec::SceneValue;
use crate::geometry::{Mat4, Vec3};
use crate::scene::MeshData;

/// Ray hits closer than this to a triangle edge or vertex are ambiguous.
pub const DEGENERATE_TOLERANCE: f64 = 1e-9;
pub const MAX_RAY_RETRIES: usize = 8;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate geometry: every ray from {0:?} grazed an edge or vertex")]
    Degenerate(Vec3),
    #[error(transparent)]
    Bus(#[from] BusError),
}

pub type Result<T> = std::result::Result<T, FixtureError>;

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Unsigned distance from `p` to the mesh surface and the closest point.
pub fn point_mesh_distance(p: Vec3, mesh: &MeshData) -> Result<(f64, Vec3)> {
    if mesh.triangles.is_empty() {
        return Err(FixtureError::InvalidInput("empty mesh".into()));
    }
    let mut best = (f64::INFINITY, Vec3::ZERO);
    for [a, b, c] in mesh.triangles_iter() {
        let q = closest_point_on_triangle(p, a, b, c);
        let d = q.distance(p);
        if d < best.0 {
            best = (d, q);
        }
    }
    Ok(best)
}

enum RayHit {
    Miss,
    Hit,
    Degenerate,
}

fn ray_triangle(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> RayHit {
    let e1 = b - a;
    let e2 = c - a;
    let h = d.cross(e2);
    let det = e1.dot(h);
    if det.abs() < 1e-15 {
        return RayHit::Miss;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(h) * inv;
    let q = s.cross(e1);
    let v = d.dot(q) * inv;
    let t = e2.dot(q) * inv;
    if t <= 0.0 {
        return RayHit::Miss;
    }
    let w = 1.0 - u - v;
    let tol = DEGENERATE_TOLERANCE;
    if u < -tol || v < -tol || w < -tol {
        return RayHit::Miss;
    }
    if u < tol || v < tol || w < tol {
        return RayHit::Degenerate;
    }
    RayHit::Hit
}

fn ray_direction(attempt: usize) -> Vec3 {
    if attempt == 0 {
        return Vec3::X;
    }
    // Fixed irrational-ish tilts so retries are reproducible.
    let k = attempt as f64;
    let y = (k * 0.618_033_988_75).fract() - 0.5;
    let z = (k * 0.414_213_562_37).fract() - 0.5;
    let v = Vec3::new(1.0, 0.37 * y, 0.29 * z);
    v * (1.0 / v.norm())
}

/// Parity ray cast along +x, retried with perturbed directions when the ray
/// grazes an edge or vertex. The mesh must be closed.
pub fn is_inside(p: Vec3, mesh: &MeshData) -> Result<bool> {
    if mesh.triangles.is_empty() {
        return Err(FixtureError::InvalidInput("empty mesh".into()));
    }
    'attempt: for attempt in 0..=MAX_RAY_RETRIES {
        let d = ray_direction(attempt);
        let mut crossings = 0usize;
        for [a, b, c] in mesh.triangles_iter() {
            match ray_triangle(p, d, a, b, c) {
                RayHit::Miss => {}
                RayHit::Hit => crossings += 1,
                RayHit::Degenerate => continue 'attempt,
            }
        }
        return Ok(crossings % 2 == 1);
    }
    Err(FixtureError::Degenerate(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BreachEvent {
    Entered,
    Exited,
    None,
}

/// Tracks whether a watched point is inside a closed surface.
#[derive(Debug, Clone)]
pub struct BreachWarningState {
    pub watched_node_id: String,
    pub surface: MeshData,
    pub inside: bool,
    /// Negative inside, meters.
    pub signed_distance: f64,
    pub closest_point: Vec3,
    pub last_stamp_ns: i64,
    pub events: Vec<(BreachEvent, i64)>,
}

impl BreachWarningState {
    pub fn new(watched_node_id: impl Into<String>, surface: MeshData) -> Result<Self> {
        if surface.triangles.is_empty() {
            return Err(FixtureError::InvalidInput("empty surface mesh".into()));
        }
        Ok(BreachWarningState {
            watched_node_id: watched_node_id.into(),
            surface,
            inside: false,
            signed_distance: f64::INFINITY,
            closest_point: Vec3::ZERO,
            last_stamp_ns: 0,
            events: Vec::new(),
        })
    }
}

/// Recomputes inside/outside and distance; reports a transition when the
/// inside flag flips.
pub fn update_breach(state: &mut BreachWarningState, p: Vec3, stamp_ns: i64) -> Result<BreachEvent> {
    let (d, q) = point_mesh_distance(p, &state.surface)?;
    let inside = is_inside(p, &state.surface)?;
    let event = match (state.inside, inside) {
        (false, true) => BreachEvent::Entered,
        (true, false) => BreachEvent::Exited,
        _ => BreachEvent::None,
    };
    state.inside = inside;
    state.signed_distance = if inside { -d } else { d };
    state.closest_point = q;
    state.last_stamp_ns = stamp_ns;
    if event != BreachEvent::None {
        state.events.push((event, stamp_ns));
    }
    Ok(event)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureMode {
    /// Hold the pose measured when the breach began.
    Latch,
    /// Republish the current measured pose every step.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixtureAction {
    Servo(Mat4),
    NullWrench,
}

/// Publishes a servo pose while breached and a null wrench otherwise.
#[derive(Debug)]
pub struct FixtureController {
    pub s1: Subscriber,
    pub p1: Publisher,
    pub p2: Publisher,
    pub latched_pose: Option<Mat4>,
    pub mode: FixtureMode,
}

impl FixtureController {
    pub fn new(s1: Subscriber, p1: Publisher, p2: Publisher, mode: FixtureMode) -> Self {
        FixtureController {
            s1,
            p1,
            p2,
            latched_pose: None,
            mode,
        }
    }
}

pub const NULL_WRENCH: [f64; 6] = [0.0; 6];

/// One controller step; publishes on exactly one of P1 and P2.
pub fn fixture_step(ctrl: &mut FixtureController, state: &BreachWarningState, measured: Mat4) -> Result<FixtureAction> {
    if state.inside {
        let latched = *ctrl.latched_pose.get_or_insert(measured);
        let target = match ctrl.mode {
            FixtureMode::Latch => latched,
            FixtureMode::Literal => measured,
        };
        ctrl.p1.publish(&SceneValue::Matrix(target))?;
        Ok(FixtureAction::Servo(target))
    } else {
        ctrl.latched_pose = None;
        ctrl.p2.publish(&SceneValue::DoubleArray(NULL_WRENCH.to_vec()))?;
        Ok(FixtureAction::NullWrench)
    }
}
