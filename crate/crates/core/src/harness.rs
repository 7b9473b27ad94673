//! Benchmarks and scripted end-to-end demos: the round-trip latency loop,
//! spin overhead, a simulated servo device, the virtual-fixture demo and the
//! pose-array trajectory relay.

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use crate::bus::{unix_now_ns, BridgeNode, BusError, Context, LoopLimit, Publisher, Subscriber};
use crate::codec::{ByteImage, JointState, SceneValue, TypeTag};
use crate::fixture::{
    fixture_step, update_breach, BreachEvent, BreachWarningState, FixtureAction, FixtureController, FixtureError,
    FixtureMode,
};
use crate::geometry::{interpolate_rigid, matrix_to_quat, slerp, Mat4, Vec3};
use crate::robot::{parse_urdf, JointKind, LoadOptions, RobotModel, JOINT_STATES_TOPIC};
use crate::scene::{MeshData, NodeId, Scene, TransformNode};

pub const PING_TOPIC: &str = "/latency/ping";
pub const PONG_TOPIC: &str = "/latency/pong";
pub const DEFAULT_GAIN: f64 = 0.2;
pub const WAYPOINT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error("{0}")]
    Robot(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Mean, sample standard deviation, min and max.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        if xs.is_empty() {
            return Summary::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Summary {
            mean,
            std: var.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencyReport {
    pub mode: String,
    pub server_period_ms: f64,
    pub client_period_ms: f64,
    pub sent: u64,
    pub received: u64,
    pub lost: u64,
    pub tof_ns: Vec<i64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyReport {
    pub fn new(mode: &str, server_period: Duration, client_period: Duration, sent: u64, tof_ns: Vec<i64>) -> Self {
        let ms: Vec<f64> = tof_ns.iter().map(|&t| t as f64 / 1e6).collect();
        let s = Summary::of(&ms);
        let received = tof_ns.len() as u64;
        LatencyReport {
            mode: mode.to_string(),
            server_period_ms: server_period.as_secs_f64() * 1e3,
            client_period_ms: client_period.as_secs_f64() * 1e3,
            sent,
            received,
            lost: sent.saturating_sub(received),
            tof_ns,
            mean_ms: s.mean,
            std_ms: s.std,
            min_ms: s.min,
            max_ms: s.max,
        }
    }
}

/// Echoes every Double received on [`PING_TOPIC`] back on [`PONG_TOPIC`]
/// from inside the subscriber's modified observer.
pub fn install_relay(node: &mut BridgeNode) -> Result<()> {
    let sub = node.create_subscriber(TypeTag::Double, PING_TOPIC)?;
    let back = node.create_publisher(TypeTag::Double, PONG_TOPIC)?;
    node.scene_mut().observe_modified(&sub.node_id(), move |scene, id| {
        if let Ok(v) = scene.value(id) {
            if let Some(value) = &v.value {
                if let Err(e) = back.publish(value) {
                    log::warn!("relay publish failed: {e}");
                }
            }
        }
    })?;
    Ok(())
}

/// Client side of the latency loop. Send times are embedded as nanoseconds
/// since the client's epoch and compared against arrival stamps.
pub struct LatencyClient {
    ping: Publisher,
    pong: Subscriber,
    epoch_ns: i64,
    tofs: Rc<RefCell<Vec<i64>>>,
    pub sent: u64,
}

impl LatencyClient {
    pub fn install(node: &mut BridgeNode) -> Result<LatencyClient> {
        let ping = node.create_publisher(TypeTag::Double, PING_TOPIC)?;
        let pong = node.create_subscriber(TypeTag::Double, PONG_TOPIC)?;
        let epoch_ns = unix_now_ns();
        let tofs = Rc::new(RefCell::new(Vec::new()));
        let sink = tofs.clone();
        node.scene_mut().observe_modified(&pong.node_id(), move |scene, id| {
            if let Ok(v) = scene.value(id) {
                if let Some(SceneValue::Double(sent)) = v.value {
                    sink.borrow_mut().push(v.received_ns - epoch_ns - sent as i64);
                }
            }
        })?;
        Ok(LatencyClient {
            ping,
            pong,
            epoch_ns,
            tofs,
            sent: 0,
        })
    }

    pub fn send(&mut self) -> Result<()> {
        let t = (unix_now_ns() - self.epoch_ns) as f64;
        self.ping.publish(&SceneValue::Double(t))?;
        self.sent += 1;
        Ok(())
    }

    pub fn received(&self) -> u64 {
        self.pong.received_count()
    }

    pub fn tofs(&self) -> Vec<i64> {
        self.tofs.borrow().clone()
    }
}

/// Runs the client loop on `node`: one message per cycle at a random phase
/// within the period, then keeps spinning until every echo is back or
/// `drain_timeout` passes.
pub fn run_latency_client(
    node: &mut BridgeNode,
    count: u64,
    seed: u64,
    drain_timeout: Duration,
    server_period: Duration,
) -> Result<LatencyReport> {
    let mut client = LatencyClient::install(node)?;
    let period = node.spin_period();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut last_send: Option<Instant> = None;
    let mut error: Option<HarnessError> = None;
    node.spin_loop_with(LoopLimit::Cycles(u64::MAX), |_, _| {
        if client.sent < count {
            let phase = period.mul_f64(rng.gen_range(0.0..0.9));
            thread::sleep(phase);
            if let Err(e) = client.send() {
                error = Some(e);
                return false;
            }
            last_send = Some(Instant::now());
            return true;
        }
        let done = client.received() >= count;
        let timed_out = last_send.map_or(true, |t| t.elapsed() > drain_timeout);
        !(done || timed_out)
    });
    if let Some(e) = error {
        log::warn!("latency client stopped early: {e}");
    }
    let mode = "tcp";
    Ok(LatencyReport::new(mode, server_period, period, client.sent, client.tofs()))
}

/// Serves the relay until `stop` is set, or until the last peer leaves when
/// `exit_when_idle` is true.
pub fn run_latency_server(node: &mut BridgeNode, stop: Arc<AtomicBool>, exit_when_idle: bool) -> Result<()> {
    install_relay(node)?;
    node.spin_loop_with(LoopLimit::UntilStopped(stop), |n, _| {
        !(exit_when_idle && n.counters().connections > 0 && n.peer_count() == 0)
    });
    Ok(())
}

/// Both ends in one process; each spin happens right after the publish.
pub fn bench_latency_in_process(count: u64) -> Result<LatencyReport> {
    let ctx = Context::new();
    let mut server = BridgeNode::new(&ctx, "latency_server", Duration::from_millis(20))?;
    let mut client_node = BridgeNode::new(&ctx, "latency_client", Duration::from_millis(20))?;
    install_relay(&mut server)?;
    let mut client = LatencyClient::install(&mut client_node)?;
    for _ in 0..count {
        client.send()?;
        server.spin_once();
        client_node.spin_once();
    }
    Ok(LatencyReport::new(
        "in_process",
        Duration::ZERO,
        Duration::ZERO,
        client.sent,
        client.tofs(),
    ))
}

/// Server on its own thread, client on the calling thread, over loopback TCP.
pub fn bench_latency_threads(server_period: Duration, client_period: Duration, count: u64, seed: u64) -> Result<LatencyReport> {
    let (tx, rx) = mpsc::channel::<std::result::Result<SocketAddr, String>>();
    let stop = Arc::new(AtomicBool::new(false));
    let stop_server = stop.clone();
    let handle = thread::spawn(move || {
        let ctx = Context::new();
        let mut node = match BridgeNode::new(&ctx, "latency_server", server_period) {
            Ok(n) => n,
            Err(e) => {
                let _ = tx.send(Err(e.to_string()));
                return;
            }
        };
        match node.listen("127.0.0.1:0") {
            Ok(a) => {
                let _ = tx.send(Ok(a));
            }
            Err(e) => {
                let _ = tx.send(Err(e.to_string()));
                return;
            }
        }
        if let Err(e) = run_latency_server(&mut node, stop_server, true) {
            log::warn!("latency server: {e}");
        }
    });
    let addr = rx
        .recv()
        .map_err(|e| HarnessError::InvalidInput(e.to_string()))?
        .map_err(|e| HarnessError::Bus(BusError::Transport(e)))?;
    let ctx = Context::new();
    let mut node = BridgeNode::new(&ctx, "latency_client", client_period)?;
    node.connect(addr)?;
    let report = run_latency_client(&mut node, count, seed, Duration::from_secs(2), server_period);
    node.close_peers();
    stop.store(true, Ordering::Relaxed);
    let _ = handle.join();
    let mut r = report?;
    r.mode = "threads".into();
    Ok(r)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SpinBenchReport {
    pub cycles: u64,
    pub period_ms: f64,
    pub robots: usize,
    pub links: usize,
    pub lookup_nodes: usize,
    pub model_nodes: usize,
    pub joint_states_sent: u64,
    pub overruns: u64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub durations_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SpinBenchConfig {
    pub urdf: Option<String>,
    pub robots: usize,
    pub cycles: u64,
    pub period: Duration,
    /// Extra lookup nodes are added until at least this many exist.
    pub min_lookups: usize,
    pub search_roots: Vec<PathBuf>,
    pub base_dir: Option<PathBuf>,
}

impl Default for SpinBenchConfig {
    fn default() -> Self {
        SpinBenchConfig {
            urdf: None,
            robots: 1,
            cycles: 100,
            period: Duration::from_millis(20),
            min_lookups: 0,
            search_roots: Vec::new(),
            base_dir: None,
        }
    }
}

/// Joint positions for time `t`, inside the limits of every joint.
pub fn sweep_positions(model: &RobotModel, t: f64) -> JointState {
    let mut names = Vec::new();
    let mut positions = Vec::new();
    for (k, j) in model.movable_joints().enumerate() {
        let s = (2.0 * PI * 0.5 * t + k as f64).sin();
        let q = match (j.kind, j.limits) {
            (JointKind::Revolute | JointKind::Prismatic, Some(l)) => {
                let mid = 0.5 * (l.lower + l.upper);
                mid + 0.4 * (l.upper - l.lower) * s
            }
            _ => s,
        };
        names.push(j.name.clone());
        positions.push(q);
    }
    JointState {
        stamp_ns: unix_now_ns(),
        names,
        positions,
    }
}

/// Measures `spin_once` on a node with `robots` copies of the URDF loaded
/// and a joint-state stream published once per cycle.
pub fn bench_spin(cfg: &SpinBenchConfig) -> Result<SpinBenchReport> {
    let ctx = Context::new();
    let mut node = BridgeNode::new(&ctx, "bench_spin", cfg.period)?;
    let mut params = BridgeNode::new(&ctx, "robot_params", cfg.period)?;
    let mut driver = BridgeNode::new(&ctx, "joint_driver", cfg.period)?;
    let model = match &cfg.urdf {
        Some(xml) if cfg.robots > 0 => Some(parse_urdf(xml).map_err(|e| HarnessError::Robot(e.to_string()))?),
        _ => None,
    };
    let mut robots = Vec::new();
    if let (Some(xml), Some(model)) = (&cfg.urdf, &model) {
        params.set_parameter("robot_description", crate::bus::ParamValue::String(xml.clone()))?;
        for k in 0..cfg.robots {
            let prefix = if k == 0 { String::new() } else { format!("robot{k}/") };
            let opts = LoadOptions {
                search_roots: cfg.search_roots.clone(),
                base_dir: cfg.base_dir.clone(),
                frame_prefix: prefix.clone(),
                ..LoadOptions::default()
            };
            robots.push(node.load_robot("robot_params", opts)?);
            node.create_state_publisher(model.clone(), JOINT_STATES_TOPIC, &prefix)?;
        }
        for _ in 0..3 {
            node.spin_once();
        }
        for r in &robots {
            if !r.is_loaded() {
                return Err(HarnessError::Robot(format!("robot did not load: {:?}", r.status())));
            }
        }
        let links: Vec<String> = model.links.iter().map(|l| l.name.clone()).collect();
        let mut i = 0;
        while node.lookup_nodes().len() < cfg.min_lookups && !links.is_empty() {
            let child = &links[i % links.len()];
            let parent = &links[(i + 1) % links.len()];
            node.create_lookup_node(parent, child)?;
            i += 1;
        }
    }
    let joint_pub = driver.create_publisher(TypeTag::JointState, JOINT_STATES_TOPIC)?;
    let start = Instant::now();
    let mut sent = 0u64;
    let publish = |sent: &mut u64| {
        if let Some(m) = &model {
            let js = sweep_positions(m, start.elapsed().as_secs_f64());
            if joint_pub.publish_bridge(&crate::codec::BridgeValue::JointState(js)).is_ok() {
                *sent += 1;
            }
        }
    };
    publish(&mut sent);
    let stats = node.spin_loop_with(LoopLimit::Cycles(cfg.cycles), |_, _| {
        publish(&mut sent);
        true
    });
    let ms = stats.durations_ms();
    let s = Summary::of(&ms);
    Ok(SpinBenchReport {
        cycles: stats.cycles,
        period_ms: cfg.period.as_secs_f64() * 1e3,
        robots: robots.len(),
        links: model.as_ref().map_or(0, |m| m.links.len() * robots.len()),
        lookup_nodes: node.lookup_nodes().len(),
        model_nodes: robots.iter().map(|r| r.model_node_ids().len()).sum(),
        joint_states_sent: sent,
        overruns: stats.overruns,
        mean_ms: s.mean,
        std_ms: s.std,
        min_ms: s.min,
        max_ms: s.max,
        durations_ms: ms,
    })
}

/// First-order servo stand-in for a haptic device or robot arm.
#[derive(Debug, Clone)]
pub struct SimDevice {
    pub pose: Mat4,
    pub target: Option<Mat4>,
    pub alpha: f64,
    pub script: VecDeque<Mat4>,
    pub publisher: Option<Publisher>,
    pub steps: u64,
}

impl SimDevice {
    pub fn new(pose: Mat4) -> Self {
        SimDevice {
            pose,
            target: None,
            alpha: DEFAULT_GAIN,
            script: VecDeque::new(),
            publisher: None,
            steps: 0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(HarnessError::InvalidInput(format!("gain {alpha} outside (0, 1]")));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn publish_pose(&self) -> Result<()> {
        if let Some(p) = &self.publisher {
            p.publish(&SceneValue::Matrix(self.pose))?;
        }
        Ok(())
    }
}

/// Moves toward the servo target, or to the next scripted pose when no
/// target is set, then publishes the measured pose.
pub fn sim_device_step(dev: &mut SimDevice, dt: f64) -> Result<Mat4> {
    if !(dt > 0.0) {
        return Err(HarnessError::InvalidInput("dt must be positive".into()));
    }
    if let Some(t) = dev.target {
        dev.pose = interpolate_rigid(&dev.pose, &t, dev.alpha).map_err(|e| HarnessError::InvalidInput(e.to_string()))?;
    } else if let Some(next) = dev.script.pop_front() {
        dev.pose = next;
    }
    dev.steps += 1;
    dev.publish_pose()?;
    Ok(dev.pose)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPlan {
    pub poses: Vec<Mat4>,
    /// Follower speed, m/s.
    pub speed: f64,
    pub sample_period: f64,
}

impl TrajectoryPlan {
    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(HarnessError::InvalidInput("empty plan".into()));
        }
        if let Some(i) = self.poses.iter().position(|p| !p.is_finite()) {
            return Err(HarnessError::InvalidInput(format!("pose {i} is not finite")));
        }
        if !(self.speed > 0.0 && self.sample_period > 0.0) {
            return Err(HarnessError::InvalidInput("speed and sample period must be positive".into()));
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.poses.iter().map(Mat4::translation_part).collect()
    }
}

/// Samples the world transform of `node_id` every `period` seconds for
/// `duration` seconds. `advance` moves the scene to each sample time first.
pub fn capture_pose_array<F>(
    scene: &mut Scene,
    node_id: &str,
    period: f64,
    duration: f64,
    mut advance: F,
) -> Result<TrajectoryPlan>
where
    F: FnMut(&mut Scene, f64),
{
    if !(period > 0.0 && duration >= 0.0) {
        return Err(HarnessError::InvalidInput("period must be positive".into()));
    }
    if !scene.contains(node_id) {
        return Err(HarnessError::InvalidInput(format!("no node '{node_id}'")));
    }
    let n = (duration / period).round() as usize;
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * period;
        advance(scene, t);
        poses.push(
            scene
                .world_transform(node_id)
                .map_err(|e| HarnessError::InvalidInput(e.to_string()))?,
        );
    }
    Ok(TrajectoryPlan {
        poses,
        speed: 0.0,
        sample_period: period,
    })
}

/// Drives the device through the plan's waypoints at constant speed and
/// returns the poses recorded every sample period, starting with the
/// initial pose.
pub fn follow_trajectory(dev: &mut SimDevice, plan: &TrajectoryPlan) -> Result<Vec<Mat4>> {
    plan.validate()?;
    let step = plan.speed * plan.sample_period;
    let mut trace = vec![dev.pose];
    let mut seg_start = dev.pose;
    let mut idx = 0;
    let max_samples = 10_000_000usize;
    while idx < plan.poses.len() {
        let mut budget = step;
        while idx < plan.poses.len() {
            let wp = plan.poses[idx];
            let here = dev.pose.translation_part();
            let dist = here.distance(wp.translation_part());
            if dist <= WAYPOINT_TOLERANCE || dist <= budget {
                budget -= dist;
                dev.pose = wp;
                seg_start = wp;
                idx += 1;
                continue;
            }
            if budget <= 0.0 {
                break;
            }
            let seg_len = seg_start.translation_part().distance(wp.translation_part());
            let pos = here + (wp.translation_part() - here) * (budget / dist);
            let frac = if seg_len > 0.0 {
                (1.0 - (dist - budget) / seg_len).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let q = slerp(
                matrix_to_quat(&seg_start).map_err(|e| HarnessError::InvalidInput(e.to_string()))?,
                matrix_to_quat(&wp).map_err(|e| HarnessError::InvalidInput(e.to_string()))?,
                frac,
            )
            .map_err(|e| HarnessError::InvalidInput(e.to_string()))?;
            dev.pose = Mat4::from_pose(pos, q).map_err(|e| HarnessError::InvalidInput(e.to_string()))?;
            break;
        }
        if idx == plan.poses.len() && trace.last() == Some(&dev.pose) {
            break;
        }
        dev.publish_pose()?;
        trace.push(dev.pose);
        if trace.len() > max_samples {
            return Err(HarnessError::InvalidInput("trajectory did not converge".into()));
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Deviation {
    pub mean: f64,
    pub max: f64,
}

pub fn closest_on_segment(p: Vec3, a: Vec3, b: Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Distance from each executed sample to the planned polyline.
pub fn path_deviation(planned: &[Vec3], executed: &[Vec3]) -> Result<Deviation> {
    if planned.is_empty() || executed.is_empty() {
        return Err(HarnessError::InvalidInput("empty trace".into()));
    }
    let dist = |p: Vec3| -> f64 {
        if planned.len() == 1 {
            return p.distance(planned[0]);
        }
        planned
            .windows(2)
            .map(|w| p.distance(closest_on_segment(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min)
    };
    let ds: Vec<f64> = executed.iter().map(|&p| dist(p)).collect();
    Ok(Deviation {
        mean: ds.iter().sum::<f64>() / ds.len() as f64,
        max: ds.iter().copied().fold(0.0, f64::max),
    })
}

/// Index of the nearest waypoint for each executed sample.
pub fn nearest_waypoints(planned: &[Vec3], executed: &[Vec3]) -> Vec<usize> {
    executed
        .iter()
        .map(|p| {
            planned
                .iter()
                .enumerate()
                .min_by(|a, b| p.distance(*a.1).total_cmp(&p.distance(*b.1)))
                .map_or(0, |(i, _)| i)
        })
        .collect()
}

pub fn is_monotone(xs: &[usize]) -> bool {
    xs.windows(2).all(|w| w[0] <= w[1])
}

#[derive(Debug, Clone)]
pub struct FixtureDemoConfig {
    pub surface: MeshData,
    pub mode: FixtureMode,
    /// Straight tool path start and the point it reaches before turning back.
    pub start: Vec3,
    pub turn: Vec3,
    /// Path resolution, meters per step.
    pub step: f64,
    pub dt: f64,
    pub measured_topic: String,
    pub servo_topic: String,
    pub wrench_topic: String,
    pub tracker_topic: String,
}

impl FixtureDemoConfig {
    /// Straight path into `surface` along a fixed slanted direction toward
    /// its centroid, turning back `depth` meters past the entry point.
    pub fn for_mesh(surface: MeshData, mode: FixtureMode, depth: f64) -> Result<Self> {
        if surface.vertices.is_empty() || !(depth > 0.0) {
            return Err(HarnessError::InvalidInput("need a nonempty mesh and a positive depth".into()));
        }
        let n = surface.vertices.len() as f64;
        let center = surface.vertices.iter().fold(Vec3::ZERO, |acc, v| acc + *v) * (1.0 / n);
        let radius = surface.vertices.iter().map(|v| v.distance(center)).fold(0.0, f64::max);
        let dir = Vec3::new(1.0, 0.02, 0.01);
        let dir = dir * (1.0 / dir.norm());
        let far = center + dir * (-1.5 * radius);
        let samples = 10_000;
        let at = |k: f64| far + dir * (1.5 * radius * k / samples as f64);
        let mut hit = None;
        for k in 1..=samples {
            if crate::fixture::is_inside(at(k as f64), &surface)? {
                hit = Some(k as f64);
                break;
            }
        }
        let k = hit.ok_or_else(|| HarnessError::InvalidInput("tool path misses the mesh".into()))?;
        let (mut lo, mut hi) = (k - 1.0, k);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if crate::fixture::is_inside(at(mid), &surface)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let entry = at(hi);
        Ok(FixtureDemoConfig {
            surface,
            mode,
            start: entry + dir * (-2.0 * depth),
            turn: entry + dir * depth,
            step: depth / 50.0,
            dt: 0.01,
            measured_topic: "/measured_cp".into(),
            servo_topic: "/servo_cp".into(),
            wrench_topic: "/body/servo_cf".into(),
            tracker_topic: "/tracker_cp".into(),
        })
    }

    /// Unit sphere, 50 mm deep.
    pub fn unit_sphere(mode: FixtureMode) -> Result<Self> {
        let sphere = crate::robot::tessellate(&crate::robot::Geometry::Sphere { radius: 1.0 })
            .map_err(|e| HarnessError::InvalidInput(e.to_string()))?;
        Self::for_mesh(sphere, mode, 0.05)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BreachRecord {
    pub step: usize,
    pub event: BreachEvent,
    pub tool_position: [f64; 3],
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FixtureDemoReport {
    pub mode: String,
    pub steps: usize,
    pub breach_events: Vec<BreachRecord>,
    pub breach_event_count: usize,
    pub outside_steps: usize,
    pub inside_steps: usize,
    pub null_wrenches_published: u64,
    pub null_wrenches_received: u64,
    pub servo_published: u64,
    pub servo_received: u64,
    pub entry_position: Option<[f64; 3]>,
    pub max_tool_depth_mm: f64,
    pub depth_after_entry_mm: f64,
    pub hold_error_mean_mm: f64,
    pub hold_error_max_mm: f64,
}

/// Scripted virtual-fixture run. A tracked tool follows a straight path into
/// the surface and back out; a simulated device follows the same script and
/// is held by the fixture while the tool is inside.
pub fn run_fixture_demo(cfg: &FixtureDemoConfig) -> Result<FixtureDemoReport> {
    if !(cfg.step > 0.0) {
        return Err(HarnessError::InvalidInput("step must be positive".into()));
    }
    let ctx = Context::new();
    let mut bridge = BridgeNode::new(&ctx, "fixture_bridge", Duration::from_millis(20))?;
    let mut device_node = BridgeNode::new(&ctx, "sim_device", Duration::from_millis(20))?;
    let mut tracker_node = BridgeNode::new(&ctx, "tracker", Duration::from_millis(20))?;

    let legs = cfg.start.distance(cfg.turn);
    let n = (legs / cfg.step).round().max(1.0) as usize;
    let mut path: Vec<Vec3> = (0..=n).map(|k| cfg.start.lerp(cfg.turn, k as f64 / n as f64)).collect();
    let back: Vec<Vec3> = path.iter().rev().skip(1).copied().collect();
    path.extend(back);

    let script: VecDeque<Mat4> = path.iter().map(|&p| Mat4::from_translation(p)).collect();
    let device = Rc::new(RefCell::new(SimDevice::new(script[0])));
    device.borrow_mut().script = script.clone();
    device.borrow_mut().script.pop_front();
    device.borrow_mut().publisher = Some(device_node.create_publisher(TypeTag::PoseStamped, &cfg.measured_topic)?);

    let servo_sub = device_node.create_subscriber(TypeTag::PoseStamped, &cfg.servo_topic)?;
    let wrench_sub = device_node.create_subscriber(TypeTag::WrenchStamped, &cfg.wrench_topic)?;
    let dev = device.clone();
    device_node.scene_mut().observe_modified(&servo_sub.node_id(), move |scene, id| {
        if let Ok(v) = scene.value(id) {
            if let Some(SceneValue::Matrix(m)) = v.value {
                dev.borrow_mut().target = Some(m);
            }
        }
    })?;
    let dev = device.clone();
    device_node.scene_mut().observe_modified(&wrench_sub.node_id(), move |scene, id| {
        if let Ok(v) = scene.value(id) {
            if let Some(SceneValue::DoubleArray(w)) = &v.value {
                if w.iter().all(|x| *x == 0.0) {
                    dev.borrow_mut().target = None;
                }
            }
        }
    })?;

    let tracker_pub = tracker_node.create_publisher(TypeTag::PoseStamped, &cfg.tracker_topic)?;
    let s1 = bridge.create_subscriber(TypeTag::PoseStamped, &cfg.measured_topic)?;
    let tool = bridge.create_subscriber(TypeTag::PoseStamped, &cfg.tracker_topic)?;
    let p1 = bridge.create_publisher(TypeTag::PoseStamped, &cfg.servo_topic)?;
    let p2 = bridge.create_publisher(TypeTag::WrenchStamped, &cfg.wrench_topic)?;
    let controller = Rc::new(RefCell::new(FixtureController::new(s1.clone(), p1.clone(), p2.clone(), cfg.mode)));
    let breach = Rc::new(RefCell::new(BreachWarningState::new(tool.node_id(), cfg.surface.clone())?));
    let step_log: Rc<RefCell<Vec<(BreachEvent, bool, Option<FixtureAction>)>>> = Rc::new(RefCell::new(Vec::new()));
    let failure: Rc<RefCell<Option<String>>> = Rc::new(RefCell::new(None));
    {
        let (controller, breach, step_log, failure, s1) =
            (controller.clone(), breach.clone(), step_log.clone(), failure.clone(), s1.clone());
        bridge.scene_mut().observe_modified(&tool.node_id(), move |scene, id| {
            let Ok(v) = scene.value(id) else { return };
            let Some(SceneValue::Matrix(m)) = v.value else { return };
            let mut st = breach.borrow_mut();
            let event = match update_breach(&mut st, m.translation_part(), v.stamp_ns) {
                Ok(e) => e,
                Err(e) => {
                    *failure.borrow_mut() = Some(e.to_string());
                    return;
                }
            };
            let action = match s1.latest_scene_value() {
                Some(SceneValue::Matrix(measured)) => match fixture_step(&mut controller.borrow_mut(), &st, measured) {
                    Ok(a) => Some(a),
                    Err(e) => {
                        *failure.borrow_mut() = Some(e.to_string());
                        None
                    }
                },
                _ => None,
            };
            step_log.borrow_mut().push((event, st.inside, action));
        })?;
    }

    let mut report = FixtureDemoReport {
        mode: format!("{:?}", cfg.mode).to_lowercase(),
        ..Default::default()
    };
    let mut hold_errors = Vec::new();
    let mut entry: Option<Vec3> = None;
    let mut entry_step = 0;
    for (k, &p) in path.iter().enumerate() {
        device.borrow().publish_pose()?;
        tracker_pub.publish(&SceneValue::Matrix(Mat4::from_translation(p)))?;
        bridge.spin_once();
        device_node.spin_once();
        sim_device_step(&mut device.borrow_mut(), cfg.dt)?;
        if let Some(f) = failure.borrow_mut().take() {
            return Err(HarnessError::InvalidInput(f));
        }
        let (event, inside, _) = step_log
            .borrow()
            .last()
            .copied()
            .ok_or_else(|| HarnessError::InvalidInput("tool pose not processed".into()))?;
        if event != BreachEvent::None {
            report.breach_events.push(BreachRecord {
                step: k,
                event,
                tool_position: p.to_array(),
            });
        }
        if event == BreachEvent::Entered {
            entry = controller.borrow().latched_pose.map(|m| m.translation_part());
            entry_step = k;
        }
        if inside {
            report.inside_steps += 1;
            let depth = -breach.borrow().signed_distance;
            report.max_tool_depth_mm = report.max_tool_depth_mm.max(depth * 1e3);
            if let Some(e) = entry {
                report.depth_after_entry_mm = report.depth_after_entry_mm.max(p.distance(path[entry_step]) * 1e3);
                hold_errors.push(device.borrow().pose.translation_part().distance(e) * 1e3);
            }
        } else {
            report.outside_steps += 1;
        }
    }
    report.steps = path.len();
    report.breach_event_count = report.breach_events.len();
    report.null_wrenches_published = p2.publish_count();
    report.servo_published = p1.publish_count();
    report.null_wrenches_received = wrench_sub.received_count();
    report.servo_received = servo_sub.received_count();
    report.entry_position = entry.map(Vec3::to_array);
    let s = Summary::of(&hold_errors);
    report.hold_error_mean_mm = s.mean;
    report.hold_error_max_mm = s.max;
    Ok(report)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RelayReport {
    pub radius_m: f64,
    pub speed_m_s: f64,
    pub poses_planned: usize,
    pub pose_array_messages: u64,
    pub poses_received: usize,
    pub trace_samples: usize,
    pub duration_s: f64,
    pub mean_deviation_mm: f64,
    pub max_deviation_mm: f64,
    pub monotone_progress: bool,
}

/// Pose on a horizontal circle around the origin, tangent-aligned.
pub fn circle_pose(radius: f64, angle: f64) -> Mat4 {
    Mat4::from_axis_angle(Vec3::Z, angle)
        .map(|r| r.with_translation(Vec3::new(radius * angle.cos(), radius * angle.sin(), 0.0)))
        .unwrap_or(Mat4::IDENTITY)
}

/// Captures a circular motion as a pose array, sends it as one message to a
/// second node and executes it there with the constant-speed follower.
pub fn run_relay_demo(radius: f64, speed: f64, poses: usize, sample_period: f64) -> Result<RelayReport> {
    if !(radius > 0.0 && speed > 0.0 && sample_period > 0.0) || poses == 0 {
        return Err(HarnessError::InvalidInput("radius, speed, period and pose count must be positive".into()));
    }
    let ctx = Context::new();
    let mut planner = BridgeNode::new(&ctx, "planner", Duration::from_millis(20))?;
    let mut executor = BridgeNode::new(&ctx, "executor", Duration::from_millis(20))?;
    let tool: NodeId = planner.scene_mut().unique_id("LinearTransformNode");
    planner.scene_mut().add_node(TransformNode::new(tool.clone(), "psm_tip"))?;
    let lap = poses as f64 * sample_period;
    let mut plan = capture_pose_array(planner.scene_mut(), &tool, sample_period, lap, |scene, t| {
        let _ = scene.set_matrix(&tool, circle_pose(radius, 2.0 * PI * t / lap));
    })?;
    let sub = executor.create_subscriber(TypeTag::PoseArray, "/trajectory")?;
    let publisher = planner.create_publisher(TypeTag::PoseArray, "/trajectory")?;
    publisher.publish(&SceneValue::TransformCollection(plan.poses.clone()))?;
    executor.spin_once();
    let received = match sub.latest_scene_value() {
        Some(SceneValue::TransformCollection(ms)) => ms,
        _ => return Err(HarnessError::InvalidInput("pose array not received".into())),
    };
    plan.poses = received;
    plan.speed = speed;
    let mut device = SimDevice::new(plan.poses[0]);
    let trace = follow_trajectory(&mut device, &plan)?;
    let planned = plan.positions();
    let executed: Vec<Vec3> = trace.iter().map(Mat4::translation_part).collect();
    let dev = path_deviation(&planned, &executed)?;
    Ok(RelayReport {
        radius_m: radius,
        speed_m_s: speed,
        poses_planned: poses,
        pose_array_messages: sub.received_count(),
        poses_received: plan.poses.len(),
        trace_samples: trace.len(),
        duration_s: (trace.len().saturating_sub(1)) as f64 * sample_period,
        mean_deviation_mm: dev.mean * 1e3,
        max_deviation_mm: dev.max * 1e3,
        monotone_progress: is_monotone(&nearest_waypoints(&planned, &executed)),
    })
}

/// Writes a mono8 image as binary PGM.
pub fn write_pgm(path: &Path, img: &ByteImage) -> Result<()> {
    if img.encoding != "mono8" {
        return Err(HarnessError::InvalidInput(format!("cannot write {} as PGM", img.encoding)));
    }
    let io = |e: std::io::Error| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height).map_err(io)?;
    for row in 0..img.height as usize {
        let start = row * img.step as usize;
        f.write_all(&img.data[start..start + img.width as usize]).map_err(io)?;
    }
    Ok(())
}

/// Joint names to positions, for forward kinematics.
pub fn joint_map(js: &JointState) -> HashMap<String, f64> {
    js.names.iter().cloned().zip(js.positions.iter().copied()).collect()
}
