use std::cell::{Cell, RefCell};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, Command as Process, Stdio};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context as _};
use scenebridge::bus::{BridgeNode, Context, LoopLimit, ParamValue};
use scenebridge::codec::{Header, SceneValue, TypeTag};
use scenebridge::fixture::FixtureMode;
use scenebridge::harness::{self, FixtureDemoConfig, SpinBenchConfig};
use scenebridge::robot::{self, LoadOptions, LoadStatus};
use serde::Serialize;
use serde_json::json;

use crate::{CliConfig, CliError, Command, ModeArg};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn period(cfg: &CliConfig) -> Duration {
    Duration::from_millis(cfg.period_ms)
}

fn emit<T: Serialize>(cfg: &CliConfig, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{text}");
        let _ = out.flush();
    }
    if let Some(path) = &cfg.report {
        std::fs::write(path, format!("{text}\n"))
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

fn print_line<T: Serialize>(value: &T) {
    if let Ok(s) = serde_json::to_string(value) {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{s}");
        let _ = out.flush();
    }
}

/// Node with the configured transport attached.
fn open_node(ctx: &Context, cfg: &CliConfig) -> Result<BridgeNode> {
    let mut node = BridgeNode::new(ctx, &cfg.node_name, period(cfg)).map_err(|e| usage(e.to_string()))?;
    if let Some(addr) = &cfg.listen {
        let bound = node.listen(addr.as_str()).with_context(|| format!("listening on {addr}"))?;
        log::info!("listening on {bound}");
    }
    for addr in &cfg.connect {
        node.connect(addr.as_str()).with_context(|| format!("connecting to {addr}"))?;
    }
    Ok(node)
}

fn parse_tag(name: &str) -> Result<TypeTag> {
    name.parse::<TypeTag>()
        .map_err(|_| usage(format!("unknown type '{name}'")))
}

fn param_from_text(text: &str) -> Result<ParamValue> {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(v @ (serde_json::Value::Bool(_) | serde_json::Value::Number(_) | serde_json::Value::Array(_))) => {
            ParamValue::from_json(&v).map_err(|e| usage(e.to_string()))
        }
        Ok(serde_json::Value::String(s)) => Ok(ParamValue::String(s)),
        _ => Ok(ParamValue::String(text.to_string())),
    }
}

pub fn run(cmd: Command, cfg: &CliConfig) -> Result<()> {
    match cmd {
        Command::Serve {
            params,
            param_file,
            robot_description,
            cycles,
        } => serve(cfg, &params, param_file.as_deref(), robot_description.as_deref(), cycles),
        Command::Pub {
            topic,
            type_name,
            value,
            frame_id,
            delay_ms,
        } => publish(cfg, &topic, &type_name, &value, &frame_id, delay_ms),
        Command::Echo {
            topic,
            type_name,
            count,
            timeout_ms,
            pgm_dir,
        } => echo(cfg, &topic, &type_name, count, timeout_ms, pgm_dir.as_deref()),
        Command::Params { node, timeout_ms } => params(cfg, &node, timeout_ms),
        Command::LoadUrdf { path, fixed_frame } => load_urdf(cfg, &path, fixed_frame),
        Command::BenchLatency {
            server_period_ms,
            client_period_ms,
            count,
            in_process,
            threads,
            seed,
        } => bench_latency(cfg, server_period_ms, client_period_ms, count, in_process, threads, seed),
        Command::BenchServer { max_seconds } => bench_server(cfg, max_seconds),
        Command::BenchSpin {
            urdf,
            robots,
            cycles,
            min_lookups,
        } => bench_spin(cfg, urdf.as_deref(), robots, cycles, min_lookups),
        Command::FixtureDemo {
            mesh,
            mode,
            depth_mm,
            measured_topic,
            servo_topic,
            wrench_topic,
        } => fixture_demo(cfg, mesh.as_deref(), mode, depth_mm, measured_topic, servo_topic, wrench_topic),
        Command::RelayDemo {
            radius_mm,
            speed_mm_s,
            poses,
            sample_period_ms,
        } => {
            let r = harness::run_relay_demo(radius_mm / 1e3, speed_mm_s / 1e3, poses, sample_period_ms / 1e3)
                .map_err(|e| match e {
                    harness::HarnessError::InvalidInput(m) => usage(m),
                    e => CliError::Runtime(e.into()),
                })?;
            emit(cfg, &r)
        }
    }
}

fn serve(
    cfg: &CliConfig,
    params: &[String],
    param_file: Option<&Path>,
    robot_description: Option<&Path>,
    cycles: Option<u64>,
) -> Result<()> {
    let mut values = Vec::new();
    for p in params {
        let (name, text) = p
            .split_once('=')
            .ok_or_else(|| usage(format!("--param expects NAME=VALUE, got '{p}'")))?;
        values.push((name.to_string(), param_from_text(text)?));
    }
    if let Some(path) = param_file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for (k, v) in obj {
            values.push((k, ParamValue::from_json(&v).map_err(|e| usage(e.to_string()))?));
        }
    }
    if let Some(path) = robot_description {
        let xml = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        values.push((robot::DEFAULT_DESCRIPTION_PARAM.to_string(), ParamValue::String(xml)));
    }
    let ctx = Context::new();
    let mut node = open_node(&ctx, cfg)?;
    for (k, v) in values {
        node.set_parameter(&k, v).map_err(|e| usage(e.to_string()))?;
    }
    print_line(&json!({ "event": "serving", "node": cfg.node_name, "parameters": node.parameters().len() }));
    let limit = match cycles {
        Some(n) => LoopLimit::Cycles(n),
        None => LoopLimit::UntilStopped(Arc::new(AtomicBool::new(false))),
    };
    let stats = node.spin_loop(limit);
    emit(cfg, &json!({ "node": cfg.node_name, "loop": stats, "counters": node.counters() }))
}

fn publish(cfg: &CliConfig, topic: &str, type_name: &str, text: &str, frame_id: &str, delay_ms: u64) -> Result<()> {
    let tag = parse_tag(type_name)?;
    scenebridge::bus::validate_topic(topic).map_err(|e| usage(e.to_string()))?;
    let value = crate::values::parse_value(tag, text).map_err(|e| usage(format!("{type_name} value: {e}")))?;
    // Reject shape mismatches before touching the network.
    scenebridge::codec::scene_to_bridge(&value, tag, &Header::new(0, frame_id)).map_err(|e| usage(e.to_string()))?;
    let ctx = Context::new();
    let mut node = open_node(&ctx, cfg)?;
    let p = node.create_publisher(tag, topic).map_err(|e| usage(e.to_string()))?;
    p.set_frame_id(frame_id);
    thread::sleep(Duration::from_millis(delay_ms));
    p.publish(&value).map_err(|e| CliError::Runtime(e.into()))?;
    let counters = node.counters();
    node.close_peers();
    if counters.transport_errors > 0 {
        return Err(CliError::Runtime(anyhow!(
            "transport error: {}",
            counters.last_transport_error.unwrap_or_default()
        )));
    }
    emit(cfg, &json!({ "topic": topic, "type": tag.name(), "published": p.publish_count(), "peers": counters.connections }))
}

fn echo(cfg: &CliConfig, topic: &str, type_name: &str, count: u64, timeout_ms: u64, pgm_dir: Option<&Path>) -> Result<()> {
    let tag = parse_tag(type_name)?;
    scenebridge::bus::validate_topic(topic).map_err(|e| usage(e.to_string()))?;
    if count == 0 {
        return Ok(());
    }
    if let Some(dir) = pgm_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let ctx = Context::new();
    let mut node = open_node(&ctx, cfg)?;
    let sub = node.create_subscriber(tag, topic).map_err(|e| usage(e.to_string()))?;
    let printed = Rc::new(Cell::new(0u64));
    let failure: Rc<RefCell<Option<String>>> = Rc::new(RefCell::new(None));
    {
        let (printed, failure) = (printed.clone(), failure.clone());
        let topic = topic.to_string();
        let pgm_dir = pgm_dir.map(Path::to_path_buf);
        node.scene_mut()
            .observe_modified(&sub.node_id(), move |scene, id| {
                if printed.get() >= count {
                    return;
                }
                let Ok(v) = scene.value(id) else { return };
                let n = printed.get() + 1;
                printed.set(n);
                if let (Some(dir), Some(SceneValue::ByteImage(img))) = (&pgm_dir, &v.value) {
                    let name = format!("{}_{n:04}.pgm", topic.trim_start_matches('/').replace('/', "_"));
                    if let Err(e) = harness::write_pgm(&dir.join(name), img) {
                        *failure.borrow_mut() = Some(e.to_string());
                    }
                }
                print_line(&json!({
                    "topic": topic,
                    "type": tag.name(),
                    "stamp_ns": v.stamp_ns,
                    "received_ns": v.received_ns,
                    "value": v.value,
                }));
            })
            .map_err(|e| CliError::Runtime(e.into()))?;
    }
    let start = Instant::now();
    let timeout = Duration::from_millis(timeout_ms);
    node.spin_loop_with(LoopLimit::Cycles(u64::MAX), |_, _| {
        printed.get() < count && start.elapsed() < timeout && failure.borrow().is_none()
    });
    if let Some(f) = failure.borrow_mut().take() {
        return Err(CliError::Runtime(anyhow!(f)));
    }
    if printed.get() < count {
        return Err(CliError::Runtime(anyhow!(
            "timed out after {} of {count} messages",
            printed.get()
        )));
    }
    Ok(())
}

fn params(cfg: &CliConfig, remote: &str, timeout_ms: u64) -> Result<()> {
    let ctx = Context::new();
    let mut node = open_node(&ctx, cfg)?;
    let monitor = node.create_parameter_monitor(remote).map_err(|e| usage(e.to_string()))?;
    let start = Instant::now();
    let timeout = Duration::from_millis(timeout_ms);
    node.spin_loop_with(LoopLimit::Cycles(u64::MAX), |_, _| {
        monitor.updates() == 0 && start.elapsed() < timeout
    });
    if monitor.updates() == 0 {
        return Err(CliError::Runtime(anyhow!("no parameters from '{remote}' within {timeout_ms} ms")));
    }
    emit(cfg, &json!({ "node": remote, "parameters": monitor.snapshot() }))
}

#[derive(Serialize)]
struct LinkSummary {
    name: String,
    visuals: usize,
}

#[derive(Serialize)]
struct JointSummary {
    name: String,
    kind: robot::JointKind,
    parent: String,
    child: String,
}

fn load_urdf(cfg: &CliConfig, path: &Path, fixed_frame: Option<String>) -> Result<()> {
    let xml = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let model = robot::parse_urdf(&xml).map_err(|e| CliError::Runtime(anyhow!("{}:{e}", path.display())))?;
    let ctx = Context::new();
    let mut node = BridgeNode::new(&ctx, &cfg.node_name, period(cfg)).map_err(|e| usage(e.to_string()))?;
    let r = node.load_robot_xml(
        &xml,
        LoadOptions {
            fixed_frame: fixed_frame.clone(),
            search_roots: cfg.search_roots.clone(),
            base_dir: path.parent().map(Path::to_path_buf),
            ..LoadOptions::default()
        },
    );
    node.spin_once();
    if let LoadStatus::Failed(e) = r.status() {
        return Err(CliError::Runtime(anyhow!("{}: {e}", path.display())));
    }
    let mut lookups: Vec<serde_json::Value> = Vec::new();
    for id in r.lookup_node_ids() {
        if let Some(l) = node.lookup_node(&id) {
            lookups.push(json!({ "parent": l.parent_frame, "child": l.child_frame }));
        }
    }
    emit(
        cfg,
        &json!({
            "path": path,
            "name": model.name,
            "root": model.root,
            "fixed_frame": fixed_frame,
            "link_count": model.links.len(),
            "joint_count": model.joints.len(),
            "visual_count": model.visual_count(),
            "links": model.links.iter().map(|l| LinkSummary { name: l.name.clone(), visuals: l.visuals.len() }).collect::<Vec<_>>(),
            "joints": model.joints.iter().map(|j| JointSummary {
                name: j.name.clone(),
                kind: j.kind,
                parent: j.parent.clone(),
                child: j.child.clone(),
            }).collect::<Vec<_>>(),
            "model_nodes": r.model_node_ids().len(),
            "lookups": lookups,
            "warnings": model.warnings,
            "status": r.status(),
        }),
    )
}

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let deadline = Instant::now() + Duration::from_secs(3);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.0.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn bench_latency(
    cfg: &CliConfig,
    server_ms: u64,
    client_ms: u64,
    count: u64,
    in_process: bool,
    threads: bool,
    seed: u64,
) -> Result<()> {
    if server_ms == 0 || client_ms == 0 {
        return Err(usage("periods must be positive"));
    }
    let (server_period, client_period) = (Duration::from_millis(server_ms), Duration::from_millis(client_ms));
    let report = if in_process {
        harness::bench_latency_in_process(count).map_err(anyhow::Error::from)?
    } else if threads {
        harness::bench_latency_threads(server_period, client_period, count, seed).map_err(anyhow::Error::from)?
    } else {
        let exe = std::env::current_exe().context("locating own executable")?;
        let child = Process::new(exe)
            .args([
                "bench-server",
                "--node-name",
                "latency_server",
                "--period-ms",
                &server_ms.to_string(),
                "--listen",
                "127.0.0.1:0",
                "--log-level",
                &cfg.log_level,
            ])
            .env_remove("SCENEBRIDGE_CONNECT")
            .env_remove("SCENEBRIDGE_REPORT")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .context("spawning latency server")?;
        let mut guard = ChildGuard(child);
        let stdout = guard.0.stdout.take().ok_or_else(|| anyhow!("no server stdout"))?;
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .context("reading server address")?;
        let addr: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("server said '{line}'"))?;
        let addr = addr["listening"]
            .as_str()
            .ok_or_else(|| anyhow!("server did not report an address"))?
            .to_string();
        let ctx = Context::new();
        let mut node = BridgeNode::new(&ctx, "latency_client", client_period).map_err(anyhow::Error::from)?;
        node.connect(addr.as_str()).with_context(|| format!("connecting to {addr}"))?;
        let mut r = harness::run_latency_client(&mut node, count, seed, Duration::from_secs(2), server_period)
            .map_err(anyhow::Error::from)?;
        node.close_peers();
        drop(guard);
        r.mode = "two_process".into();
        r
    };
    emit(cfg, &report)?;
    if report.lost > 0 {
        return Err(CliError::Runtime(anyhow!("{} of {} messages lost", report.lost, report.sent)));
    }
    Ok(())
}

fn bench_server(cfg: &CliConfig, max_seconds: u64) -> Result<()> {
    let ctx = Context::new();
    let mut node = BridgeNode::new(&ctx, &cfg.node_name, period(cfg)).map_err(|e| usage(e.to_string()))?;
    let addr = node
        .listen(cfg.listen.as_deref().unwrap_or("127.0.0.1:0"))
        .context("listening")?;
    print_line(&json!({ "listening": addr.to_string() }));
    let stop = Arc::new(AtomicBool::new(false));
    let timer = stop.clone();
    thread::spawn(move || {
        thread::sleep(Duration::from_secs(max_seconds));
        timer.store(true, Ordering::Relaxed);
    });
    harness::run_latency_server(&mut node, stop, true).map_err(anyhow::Error::from)?;
    Ok(())
}

fn bench_spin(cfg: &CliConfig, urdf: Option<&Path>, robots: usize, cycles: u64, min_lookups: usize) -> Result<()> {
    let xml = match urdf {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    if let (Some(xml), Some(p)) = (&xml, urdf) {
        robot::parse_urdf(xml).map_err(|e| CliError::Runtime(anyhow!("{}:{e}", p.display())))?;
    }
    let report = harness::bench_spin(&SpinBenchConfig {
        urdf: xml,
        robots,
        cycles,
        period: period(cfg),
        min_lookups,
        search_roots: cfg.search_roots.clone(),
        base_dir: urdf.and_then(Path::parent).map(Path::to_path_buf),
    })
    .map_err(anyhow::Error::from)?;
    emit(cfg, &report)
}

#[allow(clippy::too_many_arguments)]
fn fixture_demo(
    cfg: &CliConfig,
    mesh: Option<&Path>,
    mode: ModeArg,
    depth_mm: f64,
    measured_topic: String,
    servo_topic: String,
    wrench_topic: String,
) -> Result<()> {
    if !(depth_mm > 0.0) {
        return Err(usage("--depth-mm must be positive"));
    }
    let mode = match mode {
        ModeArg::Latch => FixtureMode::Latch,
        ModeArg::Literal => FixtureMode::Literal,
    };
    let surface = match mesh {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            robot::load_stl(&bytes).map_err(|e| CliError::Runtime(anyhow!("{}: {e}", p.display())))?
        }
        None => robot::tessellate(&robot::Geometry::Sphere { radius: 1.0 }).map_err(anyhow::Error::from)?,
    };
    for t in [&measured_topic, &servo_topic, &wrench_topic] {
        scenebridge::bus::validate_topic(t).map_err(|e| usage(e.to_string()))?;
    }
    let mut demo = FixtureDemoConfig::for_mesh(surface, mode, depth_mm / 1e3).map_err(anyhow::Error::from)?;
    demo.measured_topic = measured_topic;
    demo.servo_topic = servo_topic;
    demo.wrench_topic = wrench_topic;
    let report = harness::run_fixture_demo(&demo).map_err(anyhow::Error::from)?;
    emit(cfg, &report)
}
