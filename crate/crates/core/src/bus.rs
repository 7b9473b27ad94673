//! Bridge nodes: publishers, subscribers, parameters, transform broadcast,
//! the TCP transport and the periodic spin.
//!
//! A [`BridgeNode`] is confined to the thread that created it. Transport
//! receiver threads only push raw frames onto the node's inbound queue;
//! decoding, routing, scene updates and observer callbacks all happen inside
//! [`BridgeNode::spin_once`].

use std::cell::{Cell, Ref, RefCell};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, bridge_to_scene, scene_to_bridge, BridgeValue, CodecError, FrameReader, Header, SceneValue, TypeTag};
use crate::scene::{NodeId, Scene, SceneError, TransformNode, ValueNode};
use crate::tf::{LookupNode, TfBuffer, TfError, TransformStamped};

pub const DEFAULT_SPIN_PERIOD: Duration = Duration::from_millis(20);
pub const SUBSCRIBER_QUEUE_CAPACITY: usize = 100;
pub const INBOUND_QUEUE_CAPACITY: usize = 10_000;
pub const DEFAULT_NODE_NAME: &str = "default";
pub const TF_TOPIC: &str = "/tf";
pub const PARAMS_TOPIC_PREFIX: &str = "/__params/";
pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum BusError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("type error: parameter '{name}' is {actual}, not {expected}")]
    Type {
        name: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("parameter '{0}' has not been received yet")]
    Unready(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Tf(#[from] TfError),
}

pub type Result<T> = std::result::Result<T, BusError>;

/// Wall-clock nanoseconds since the Unix epoch.
pub fn unix_now_ns() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as i64)
        .unwrap_or(0)
}

/// Topics start with '/', have at least one more character and contain no
/// whitespace.
pub fn validate_topic(topic: &str) -> Result<()> {
    if topic.len() < 2 || !topic.starts_with('/') || topic.chars().any(char::is_whitespace) {
        return Err(BusError::InvalidInput(format!("invalid topic '{topic}'")));
    }
    if topic.len() > u16::MAX as usize {
        return Err(BusError::InvalidInput("topic longer than 65535 bytes".into()));
    }
    Ok(())
}

pub fn params_topic(node: &str) -> String {
    format!("{PARAMS_TOPIC_PREFIX}{node}")
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Clone)]
pub struct InboundFrame {
    pub bytes: Vec<u8>,
    /// Arrival time, [`unix_now_ns`] clock.
    pub received_ns: i64,
}

/// Thread-safe bounded frame queue; drops the oldest frame when full.
#[derive(Debug)]
pub struct InboundQueue {
    frames: Mutex<VecDeque<InboundFrame>>,
    capacity: usize,
    dropped: AtomicU64,
}

impl InboundQueue {
    pub fn new(capacity: usize) -> Self {
        InboundQueue {
            frames: Mutex::new(VecDeque::new()),
            capacity: capacity.max(1),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn push(&self, frame: InboundFrame) {
        let mut q = lock(&self.frames);
        if q.len() >= self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(frame);
    }

    pub fn drain(&self) -> Vec<InboundFrame> {
        lock(&self.frames).drain(..).collect()
    }

    pub fn len(&self) -> usize {
        lock(&self.frames).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Default)]
struct ContextInner {
    nodes: HashMap<String, Arc<InboundQueue>>,
    default_node: Option<String>,
}

/// Process-level registry of bridge nodes. Frames published by one node are
/// delivered to the inbound queues of the other nodes in the same context.
#[derive(Debug, Clone, Default)]
pub struct Context {
    inner: Arc<Mutex<ContextInner>>,
}

impl Context {
    pub fn new() -> Self {
        Context::default()
    }

    /// Creates the context's single default node.
    pub fn create_default_node(&self) -> Result<BridgeNode> {
        if let Some(name) = &lock(&self.inner).default_node {
            return Err(BusError::Conflict(format!("default node '{name}' already exists")));
        }
        let node = BridgeNode::new(self, DEFAULT_NODE_NAME, DEFAULT_SPIN_PERIOD)?;
        lock(&self.inner).default_node = Some(DEFAULT_NODE_NAME.to_string());
        Ok(node)
    }

    pub fn default_node_name(&self) -> Option<String> {
        lock(&self.inner).default_node.clone()
    }

    pub fn node_names(&self) -> Vec<String> {
        let mut v: Vec<String> = lock(&self.inner).nodes.keys().cloned().collect();
        v.sort();
        v
    }

    fn register(&self, name: &str, queue: Arc<InboundQueue>) -> Result<()> {
        let mut inner = lock(&self.inner);
        if inner.nodes.contains_key(name) {
            return Err(BusError::Conflict(format!("node '{name}' already exists")));
        }
        inner.nodes.insert(name.to_string(), queue);
        Ok(())
    }

    fn unregister(&self, name: &str) {
        let mut inner = lock(&self.inner);
        inner.nodes.remove(name);
        if inner.default_node.as_deref() == Some(name) {
            inner.default_node = None;
        }
    }

    fn deliver(&self, from: &str, bytes: &[u8], include_self: bool, received_ns: i64) {
        let targets: Vec<Arc<InboundQueue>> = lock(&self.inner)
            .nodes
            .iter()
            .filter(|(n, _)| include_self || n.as_str() != from)
            .map(|(_, q)| q.clone())
            .collect();
        for q in targets {
            q.push(InboundFrame {
                bytes: bytes.to_vec(),
                received_ns,
            });
        }
    }
}

#[derive(Debug, Default)]
struct TransportStats {
    framing_errors: AtomicU64,
    transport_errors: AtomicU64,
    connections: AtomicU64,
    last_error: Mutex<Option<String>>,
}

impl TransportStats {
    fn error(&self, msg: String) {
        log::warn!("{msg}");
        self.transport_errors.fetch_add(1, Ordering::Relaxed);
        *lock(&self.last_error) = Some(msg);
    }
}

#[derive(Debug)]
struct Peer {
    id: u64,
    addr: SocketAddr,
    stream: TcpStream,
}

#[derive(Debug, Default)]
struct PeerSet {
    peers: Mutex<Vec<Peer>>,
    next_id: AtomicU64,
    /// Last frame per latched topic, replayed to every new peer.
    latched: Mutex<BTreeMap<String, Vec<u8>>>,
}

/// Outbound side of a node, shared with its publishers.
#[derive(Debug)]
struct Outlet {
    ctx: Context,
    node_name: String,
    peers: Arc<PeerSet>,
    stats: Arc<TransportStats>,
}

impl Outlet {
    fn send(&self, bytes: &[u8], include_self: bool) {
        self.ctx.deliver(&self.node_name, bytes, include_self, unix_now_ns());
        let mut peers = lock(&self.peers.peers);
        let mut dead = Vec::new();
        for p in peers.iter_mut() {
            if let Err(e) = p.stream.write_all(bytes) {
                self.stats.error(format!("write to {} failed: {e}", p.addr));
                dead.push(p.id);
            }
        }
        peers.retain(|p| !dead.contains(&p.id));
    }

    fn latch(&self, topic: &str, bytes: &[u8]) {
        lock(&self.peers.latched).insert(topic.to_string(), bytes.to_vec());
    }
}

struct PublisherInner {
    topic: String,
    tag: TypeTag,
    frame_id: RefCell<String>,
    count: Cell<u64>,
    outlet: Rc<Outlet>,
}

/// Cheap handle for publishing on one topic; usable from scene observers.
#[derive(Clone)]
pub struct Publisher {
    inner: Rc<PublisherInner>,
}

impl std::fmt::Debug for Publisher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Publisher")
            .field("topic", &self.inner.topic)
            .field("tag", &self.inner.tag)
            .field("publish_count", &self.inner.count.get())
            .finish()
    }
}

impl Publisher {
    pub fn topic(&self) -> &str {
        &self.inner.topic
    }

    pub fn tag(&self) -> TypeTag {
        self.inner.tag
    }

    pub fn publish_count(&self) -> u64 {
        self.inner.count.get()
    }

    /// Frame id written into stamped messages.
    pub fn set_frame_id(&self, frame: impl Into<String>) {
        *self.inner.frame_id.borrow_mut() = frame.into();
    }

    /// Converts a scene value, stamps it with the current time and sends it.
    pub fn publish(&self, value: &SceneValue) -> Result<()> {
        let header = Header::new(unix_now_ns(), self.inner.frame_id.borrow().clone());
        let msg = scene_to_bridge(value, self.inner.tag, &header)?;
        self.publish_bridge(&msg)
    }

    /// Sends an already-built wire value.
    pub fn publish_bridge(&self, msg: &BridgeValue) -> Result<()> {
        if msg.tag() != self.inner.tag {
            return Err(BusError::InvalidInput(format!(
                "publisher on {} carries {}, not {}",
                self.inner.topic,
                self.inner.tag,
                msg.tag()
            )));
        }
        msg.validate().map_err(|e| BusError::InvalidInput(e.to_string()))?;
        let bytes = codec::encode(&self.inner.topic, msg)?;
        self.inner.outlet.send(&bytes, true);
        self.inner.count.set(self.inner.count.get() + 1);
        Ok(())
    }
}

#[derive(Debug)]
pub struct SubscriberState {
    pub topic: String,
    pub tag: TypeTag,
    pub node_id: NodeId,
    pub latest: Option<BridgeValue>,
    pub latest_received_ns: i64,
    pub received_count: u64,
    pub dropped_count: u64,
    pub conversion_errors: u64,
    queue: VecDeque<(u64, BridgeValue, i64)>,
}

/// Handle to a subscriber. Each received message updates the bound scene
/// value node, which fires that node's observers.
#[derive(Debug, Clone)]
pub struct Subscriber {
    inner: Rc<RefCell<SubscriberState>>,
}

impl Subscriber {
    pub fn state(&self) -> Ref<'_, SubscriberState> {
        self.inner.borrow()
    }

    pub fn topic(&self) -> String {
        self.inner.borrow().topic.clone()
    }

    pub fn tag(&self) -> TypeTag {
        self.inner.borrow().tag
    }

    pub fn node_id(&self) -> NodeId {
        self.inner.borrow().node_id.clone()
    }

    pub fn latest(&self) -> Option<BridgeValue> {
        self.inner.borrow().latest.clone()
    }

    pub fn latest_scene_value(&self) -> Option<SceneValue> {
        self.inner.borrow().latest.as_ref().and_then(|v| bridge_to_scene(v).ok())
    }

    pub fn received_count(&self) -> u64 {
        self.inner.borrow().received_count
    }

    pub fn dropped_count(&self) -> u64 {
        self.inner.borrow().dropped_count
    }

    pub fn queued(&self) -> usize {
        self.inner.borrow().queue.len()
    }
}

/// Typed parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Double(f64),
    String(String),
    BoolList(Vec<bool>),
    IntList(Vec<i64>),
    DoubleList(Vec<f64>),
    StringList(Vec<String>),
}

impl ParamValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            ParamValue::Bool(_) => "bool",
            ParamValue::Int(_) => "int",
            ParamValue::Double(_) => "double",
            ParamValue::String(_) => "string",
            ParamValue::BoolList(_) => "bool list",
            ParamValue::IntList(_) => "int list",
            ParamValue::DoubleList(_) => "double list",
            ParamValue::StringList(_) => "string list",
        }
    }

    /// Builds a value from untyped JSON. Lists must be homogeneous.
    pub fn from_json(v: &serde_json::Value) -> Result<ParamValue> {
        use serde_json::Value as J;
        let scalar = |v: &J| -> Result<ParamValue> {
            Ok(match v {
                J::Bool(b) => ParamValue::Bool(*b),
                J::Number(n) if n.is_i64() => ParamValue::Int(n.as_i64().unwrap_or_default()),
                J::Number(n) => ParamValue::Double(n.as_f64().unwrap_or(f64::NAN)),
                J::String(s) => ParamValue::String(s.clone()),
                other => {
                    return Err(BusError::InvalidInput(format!(
                        "unsupported parameter value {other}"
                    )))
                }
            })
        };
        match v {
            J::Array(items) => {
                let mut vals = items.iter().map(scalar).collect::<Result<Vec<_>>>()?;
                let mut kinds: BTreeSet<&str> = vals.iter().map(ParamValue::type_name).collect();
                if kinds.len() == 2 && kinds.contains("int") && kinds.contains("double") {
                    for v in &mut vals {
                        if let ParamValue::Int(i) = *v {
                            *v = ParamValue::Double(i as f64);
                        }
                    }
                    kinds.remove("int");
                }
                if kinds.len() > 1 {
                    return Err(BusError::InvalidInput(format!(
                        "list parameter mixes element types {kinds:?}"
                    )));
                }
                Ok(match kinds.first().copied() {
                    None | Some("double") => ParamValue::DoubleList(
                        vals.iter()
                            .map(|v| if let ParamValue::Double(d) = v { *d } else { 0.0 })
                            .collect(),
                    ),
                    Some("bool") => ParamValue::BoolList(
                        vals.iter().map(|v| matches!(v, ParamValue::Bool(true))).collect(),
                    ),
                    Some("int") => ParamValue::IntList(
                        vals.iter()
                            .map(|v| if let ParamValue::Int(i) = v { *i } else { 0 })
                            .collect(),
                    ),
                    _ => ParamValue::StringList(
                        vals.into_iter()
                            .map(|v| if let ParamValue::String(s) = v { s } else { String::new() })
                            .collect(),
                    ),
                })
            }
            other => scalar(other),
        }
    }

    fn mismatch(&self, name: &str, expected: &'static str) -> BusError {
        BusError::Type {
            name: name.to_string(),
            expected,
            actual: self.type_name(),
        }
    }

    pub fn as_bool(&self, name: &str) -> Result<bool> {
        match self {
            ParamValue::Bool(b) => Ok(*b),
            _ => Err(self.mismatch(name, "bool")),
        }
    }

    pub fn as_int(&self, name: &str) -> Result<i64> {
        match self {
            ParamValue::Int(i) => Ok(*i),
            _ => Err(self.mismatch(name, "int")),
        }
    }

    pub fn as_double(&self, name: &str) -> Result<f64> {
        match self {
            ParamValue::Double(d) => Ok(*d),
            _ => Err(self.mismatch(name, "double")),
        }
    }

    pub fn as_str(&self, name: &str) -> Result<&str> {
        match self {
            ParamValue::String(s) => Ok(s),
            _ => Err(self.mismatch(name, "string")),
        }
    }
}

/// Full parameter set of one node, as broadcast on `/__params/<node>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub node: String,
    pub parameters: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Default)]
pub struct MonitorState {
    pub remote: String,
    pub snapshot: BTreeMap<String, ParamValue>,
    pub seen: BTreeSet<String>,
    pub updates: u64,
}

/// Mirror of one remote node's parameters.
#[derive(Debug, Clone)]
pub struct ParameterMonitor {
    inner: Rc<RefCell<MonitorState>>,
}

impl ParameterMonitor {
    pub fn remote(&self) -> String {
        self.inner.borrow().remote.clone()
    }

    pub fn is_ready(&self, name: &str) -> bool {
        self.inner.borrow().seen.contains(name)
    }

    pub fn get(&self, name: &str) -> Result<ParamValue> {
        let st = self.inner.borrow();
        if !st.seen.contains(name) {
            return Err(BusError::Unready(name.to_string()));
        }
        st.snapshot
            .get(name)
            .cloned()
            .ok_or_else(|| BusError::NotFound(name.to_string()))
    }

    pub fn snapshot(&self) -> BTreeMap<String, ParamValue> {
        self.inner.borrow().snapshot.clone()
    }

    /// Number of full-set messages applied so far.
    pub fn updates(&self) -> u64 {
        self.inner.borrow().updates
    }

    pub fn same_as(&self, other: &ParameterMonitor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn apply(&self, set: ParameterSet) {
        let mut st = self.inner.borrow_mut();
        st.seen.extend(set.parameters.keys().cloned());
        st.snapshot = set.parameters;
        st.updates += 1;
    }
}

/// Broadcasts transforms from inside observers or other callbacks.
#[derive(Clone)]
pub struct TfBroadcaster {
    buffer: Rc<RefCell<TfBuffer>>,
    outlet: Rc<Outlet>,
}

impl TfBroadcaster {
    /// Inserts into the local buffer and sends on `/tf` to every other node
    /// and peer.
    pub fn broadcast(&self, t: &TransformStamped) -> Result<()> {
        self.buffer.borrow_mut().insert(t)?;
        let bytes = codec::encode(TF_TOPIC, &BridgeValue::TfTransform(t.clone()))?;
        self.outlet.send(&bytes, false);
        Ok(())
    }
}

/// Result of one [`BridgeNode::spin_once`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SpinStats {
    pub messages_processed: u64,
    pub decode_errors: u64,
    pub dropped: u64,
    pub lookups_updated: u64,
    #[serde(with = "duration_secs")]
    pub duration: Duration,
}

mod duration_secs {
    use serde::Serializer;
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }
}

#[derive(Debug, Clone)]
pub enum LoopLimit {
    Cycles(u64),
    UntilStopped(Arc<AtomicBool>),
}

/// Aggregate of a [`BridgeNode::spin_loop`] run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LoopStats {
    pub cycles: u64,
    pub overruns: u64,
    pub messages_processed: u64,
    pub decode_errors: u64,
    #[serde(skip)]
    pub durations: Vec<Duration>,
    #[serde(with = "duration_secs")]
    pub elapsed: Duration,
}

impl LoopStats {
    pub fn durations_ms(&self) -> Vec<f64> {
        self.durations.iter().map(|d| d.as_secs_f64() * 1e3).collect()
    }
}

/// Counters accumulated by the node across spins and threads.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NodeCounters {
    pub spins: u64,
    pub messages_processed: u64,
    pub decode_errors: u64,
    pub framing_errors: u64,
    pub transport_errors: u64,
    pub inbound_dropped: u64,
    pub connections: u64,
    pub tf_rejected: u64,
    pub type_mismatches: u64,
    pub last_transport_error: Option<String>,
}

type SpinHook = Box<dyn FnMut(&mut Scene)>;

/// Named endpoint owning publishers, subscribers, parameters, transform
/// lookups, robots and the spin loop.
pub struct BridgeNode {
    name: String,
    period: Duration,
    ctx: Context,
    inbound: Arc<InboundQueue>,
    outlet: Rc<Outlet>,
    pub(crate) scene: Scene,
    publishers: Vec<Publisher>,
    subscribers: Vec<Subscriber>,
    parameters: BTreeMap<String, ParamValue>,
    monitors: BTreeMap<String, ParameterMonitor>,
    pub(crate) tf: Rc<RefCell<TfBuffer>>,
    pub(crate) lookups: Vec<LookupNode>,
    pub(crate) robots: Vec<crate::robot::RobotNode>,
    pub(crate) state_publishers: Vec<crate::robot::StatePublisher>,
    hooks: Vec<SpinHook>,
    shutdown: Arc<AtomicBool>,
    seq: u64,
    spins: u64,
    processed_total: u64,
    decode_errors_total: u64,
    tf_rejected: u64,
    type_mismatches: u64,
}

impl std::fmt::Debug for BridgeNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeNode")
            .field("name", &self.name)
            .field("period", &self.period)
            .field("publishers", &self.publishers.len())
            .field("subscribers", &self.subscribers.len())
            .finish()
    }
}

impl BridgeNode {
    pub fn new(ctx: &Context, name: &str, period: Duration) -> Result<BridgeNode> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(BusError::InvalidInput(format!("invalid node name '{name}'")));
        }
        if period.is_zero() {
            return Err(BusError::InvalidInput("spin period must be positive".into()));
        }
        let inbound = Arc::new(InboundQueue::new(INBOUND_QUEUE_CAPACITY));
        ctx.register(name, inbound.clone())?;
        let outlet = Rc::new(Outlet {
            ctx: ctx.clone(),
            node_name: name.to_string(),
            peers: Arc::new(PeerSet::default()),
            stats: Arc::new(TransportStats::default()),
        });
        Ok(BridgeNode {
            name: name.to_string(),
            period,
            ctx: ctx.clone(),
            inbound,
            outlet,
            scene: Scene::new(),
            publishers: Vec::new(),
            subscribers: Vec::new(),
            parameters: BTreeMap::new(),
            monitors: BTreeMap::new(),
            tf: Rc::new(RefCell::new(TfBuffer::default())),
            lookups: Vec::new(),
            robots: Vec::new(),
            state_publishers: Vec::new(),
            hooks: Vec::new(),
            shutdown: Arc::new(AtomicBool::new(false)),
            seq: 0,
            spins: 0,
            processed_total: 0,
            decode_errors_total: 0,
            tf_rejected: 0,
            type_mismatches: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spin_period(&self) -> Duration {
        self.period
    }

    pub fn set_spin_period(&mut self, period: Duration) -> Result<()> {
        if period.is_zero() {
            return Err(BusError::InvalidInput("spin period must be positive".into()));
        }
        self.period = period;
        Ok(())
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn scene_mut(&mut self) -> &mut Scene {
        &mut self.scene
    }

    pub fn inbound_len(&self) -> usize {
        self.inbound.len()
    }

    fn check_topic_tag(&self, topic: &str, tag: TypeTag) -> Result<()> {
        validate_topic(topic)?;
        let clash = self
            .publishers
            .iter()
            .map(|p| (p.topic().to_string(), p.tag()))
            .chain(self.subscribers.iter().map(|s| (s.topic(), s.tag())))
            .find(|(t, g)| t == topic && *g != tag);
        if let Some((_, other)) = clash {
            return Err(BusError::Conflict(format!(
                "topic {topic} already carries {other}, not {tag}"
            )));
        }
        Ok(())
    }

    pub fn create_publisher(&mut self, tag: TypeTag, topic: &str) -> Result<Publisher> {
        self.check_topic_tag(topic, tag)?;
        let p = Publisher {
            inner: Rc::new(PublisherInner {
                topic: topic.to_string(),
                tag,
                frame_id: RefCell::new(String::new()),
                count: Cell::new(0),
                outlet: self.outlet.clone(),
            }),
        };
        self.publishers.push(p.clone());
        Ok(p)
    }

    pub fn publishers(&self) -> &[Publisher] {
        &self.publishers
    }

    /// Registers a subscriber and its bound scene value node.
    pub fn create_subscriber(&mut self, tag: TypeTag, topic: &str) -> Result<Subscriber> {
        self.check_topic_tag(topic, tag)?;
        let class = format!("BridgeSubscriber{}Node", tag.name());
        let id = self.scene.unique_id(&class);
        self.scene.add_node(ValueNode::new(id.clone(), topic, class))?;
        let s = Subscriber {
            inner: Rc::new(RefCell::new(SubscriberState {
                topic: topic.to_string(),
                tag,
                node_id: id,
                latest: None,
                latest_received_ns: 0,
                received_count: 0,
                dropped_count: 0,
                conversion_errors: 0,
                queue: VecDeque::new(),
            })),
        };
        self.subscribers.push(s.clone());
        Ok(s)
    }

    pub fn subscribers(&self) -> &[Subscriber] {
        &self.subscribers
    }

    /// Sets a parameter and broadcasts the node's complete parameter set.
    pub fn set_parameter(&mut self, name: &str, value: ParamValue) -> Result<()> {
        if name.is_empty() {
            return Err(BusError::InvalidInput("empty parameter name".into()));
        }
        self.parameters.insert(name.to_string(), value);
        self.broadcast_parameters()
    }

    pub fn set_parameter_json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let v = ParamValue::from_json(value)?;
        self.set_parameter(name, v)
    }

    pub fn get_parameter(&self, name: &str) -> Result<&ParamValue> {
        self.parameters
            .get(name)
            .ok_or_else(|| BusError::NotFound(format!("parameter '{name}'")))
    }

    pub fn parameters(&self) -> &BTreeMap<String, ParamValue> {
        &self.parameters
    }

    fn broadcast_parameters(&mut self) -> Result<()> {
        let set = ParameterSet {
            node: self.name.clone(),
            parameters: self.parameters.clone(),
        };
        let json = serde_json::to_string(&set)
            .map_err(|e| BusError::InvalidInput(format!("parameter encoding: {e}")))?;
        let topic = params_topic(&self.name);
        let bytes = codec::encode(&topic, &BridgeValue::String(json))?;
        self.outlet.latch(&topic, &bytes);
        self.outlet.send(&bytes, true);
        Ok(())
    }

    /// Monitor for `remote`'s parameters; one per remote node.
    pub fn create_parameter_monitor(&mut self, remote: &str) -> Result<ParameterMonitor> {
        if remote.is_empty() {
            return Err(BusError::InvalidInput("empty remote node name".into()));
        }
        let m = self
            .monitors
            .entry(remote.to_string())
            .or_insert_with(|| ParameterMonitor {
                inner: Rc::new(RefCell::new(MonitorState {
                    remote: remote.to_string(),
                    ..Default::default()
                })),
            });
        Ok(m.clone())
    }

    pub fn monitor_count(&self) -> usize {
        self.monitors.len()
    }

    pub fn tf_broadcaster(&self) -> TfBroadcaster {
        TfBroadcaster {
            buffer: self.tf.clone(),
            outlet: self.outlet.clone(),
        }
    }

    pub fn broadcast(&mut self, t: &TransformStamped) -> Result<()> {
        self.tf_broadcaster().broadcast(t)
    }

    pub fn tf_buffer(&self) -> Ref<'_, TfBuffer> {
        self.tf.borrow()
    }

    /// Creates a scene transform node refreshed every spin from
    /// `lookup(parent_frame, child_frame, LATEST)`.
    pub fn create_lookup_node(&mut self, parent_frame: &str, child_frame: &str) -> Result<NodeId> {
        let id = self.scene.unique_id("BridgeTfLookupNode");
        self.scene.add_node(
            TransformNode::new(id.clone(), format!("{parent_frame}->{child_frame}"))
                .with_class("BridgeTfLookupNode"),
        )?;
        self.lookups
            .push(LookupNode::new(parent_frame, child_frame, id.clone()));
        Ok(id)
    }

    pub fn lookup_nodes(&self) -> &[LookupNode] {
        &self.lookups
    }

    pub fn lookup_node(&self, id: &str) -> Option<&LookupNode> {
        self.lookups.iter().find(|l| l.node_id == id)
    }

    /// Runs `hook` at the end of every spin, after lookups and robots.
    pub fn add_spin_hook(&mut self, hook: impl FnMut(&mut Scene) + 'static) {
        self.hooks.push(Box::new(hook));
    }

    pub fn counters(&self) -> NodeCounters {
        let st = &self.outlet.stats;
        NodeCounters {
            spins: self.spins,
            messages_processed: self.processed_total,
            decode_errors: self.decode_errors_total,
            framing_errors: st.framing_errors.load(Ordering::Relaxed),
            transport_errors: st.transport_errors.load(Ordering::Relaxed),
            inbound_dropped: self.inbound.dropped(),
            connections: st.connections.load(Ordering::Relaxed),
            tf_rejected: self.tf_rejected,
            type_mismatches: self.type_mismatches,
            last_transport_error: lock(&st.last_error).clone(),
        }
    }

    /// Number of completed spins.
    pub fn spin_count(&self) -> u64 {
        self.spins
    }

    pub fn peer_count(&self) -> usize {
        lock(&self.outlet.peers.peers).len()
    }

    /// Drains the inbound queue, routes and applies every frame, then runs
    /// robot updates, transform lookups and spin hooks.
    pub fn spin_once(&mut self) -> SpinStats {
        let start = Instant::now();
        let mut stats = SpinStats::default();
        let dropped_before: u64 = self.subscribers.iter().map(Subscriber::dropped_count).sum();

        for frame in self.inbound.drain() {
            match codec::decode(&frame.bytes) {
                Ok((topic, value)) => {
                    stats.messages_processed += 1;
                    self.route(&topic, value, frame.received_ns);
                }
                Err(e) => {
                    log::debug!("{}: dropping undecodable frame: {e}", self.name);
                    stats.decode_errors += 1;
                }
            }
        }
        self.process_subscribers();

        crate::robot::update_robots(self);
        let tf = self.tf.borrow();
        for l in self.lookups.iter_mut() {
            if let Some(m) = l.refresh(&tf) {
                if self.scene.set_matrix(&l.node_id, m).is_ok() {
                    stats.lookups_updated += 1;
                }
            }
        }
        drop(tf);
        for hook in self.hooks.iter_mut() {
            hook(&mut self.scene);
        }

        let dropped_after: u64 = self.subscribers.iter().map(Subscriber::dropped_count).sum();
        stats.dropped = dropped_after - dropped_before;
        stats.duration = start.elapsed();
        self.spins += 1;
        self.processed_total += stats.messages_processed;
        self.decode_errors_total += stats.decode_errors;
        stats
    }

    fn route(&mut self, topic: &str, value: BridgeValue, received_ns: i64) {
        if topic == TF_TOPIC {
            if let BridgeValue::TfTransform(t) = &value {
                if let Err(e) = self.tf.borrow_mut().insert(t) {
                    log::debug!("{}: rejected transform: {e}", self.name);
                    self.tf_rejected += 1;
                }
            }
        }
        if let Some(remote) = topic.strip_prefix(PARAMS_TOPIC_PREFIX) {
            if let (Some(m), BridgeValue::String(json)) = (self.monitors.get(remote), &value) {
                match serde_json::from_str::<ParameterSet>(json) {
                    Ok(set) => m.apply(set),
                    Err(e) => {
                        log::debug!("{}: bad parameter set from {remote}: {e}", self.name);
                        self.decode_errors_total += 1;
                    }
                }
            }
        }
        if let BridgeValue::JointState(js) = &value {
            let tf = self.tf_broadcaster();
            for sp in self.state_publishers.iter_mut() {
                if sp.topic() == topic {
                    sp.handle(js, &tf);
                }
            }
        }
        for s in &self.subscribers {
            let mut st = s.inner.borrow_mut();
            if st.topic != topic {
                continue;
            }
            if st.tag != value.tag() {
                self.type_mismatches += 1;
                continue;
            }
            if st.queue.len() >= SUBSCRIBER_QUEUE_CAPACITY {
                st.queue.pop_front();
                st.dropped_count += 1;
            }
            self.seq += 1;
            st.queue.push_back((self.seq, value.clone(), received_ns));
        }
    }

    /// Applies queued messages across subscribers in arrival order.
    fn process_subscribers(&mut self) {
        loop {
            let next = self
                .subscribers
                .iter()
                .filter_map(|s| s.inner.borrow().queue.front().map(|(seq, _, _)| (*seq, s.clone())))
                .min_by_key(|(seq, _)| *seq);
            let Some((_, sub)) = next else { break };
            let (value, received_ns, node_id) = {
                let mut st = sub.inner.borrow_mut();
                let Some((_, value, received_ns)) = st.queue.pop_front() else {
                    continue;
                };
                (value, received_ns, st.node_id.clone())
            };
            match bridge_to_scene(&value) {
                Ok(scene_value) => {
                    {
                        let mut st = sub.inner.borrow_mut();
                        st.received_count += 1;
                        st.latest_received_ns = received_ns;
                        st.latest = Some(value.clone());
                    }
                    let stamp = value.stamp_ns().unwrap_or(received_ns);
                    if let Err(e) = self.scene.set_value(&node_id, scene_value, stamp, received_ns) {
                        log::warn!("{}: bound node update failed: {e}", self.name);
                    }
                }
                Err(e) => {
                    log::debug!("{}: conversion failed: {e}", self.name);
                    sub.inner.borrow_mut().conversion_errors += 1;
                }
            }
        }
    }

    /// Calls [`spin_once`](Self::spin_once) every period.
    pub fn spin_loop(&mut self, limit: LoopLimit) -> LoopStats {
        self.spin_loop_with(limit, |_, _| true)
    }

    /// Like [`spin_loop`](Self::spin_loop); `after_spin` runs on the owner
    /// thread after each cycle and stops the loop by returning `false`.
    pub fn spin_loop_with<F>(&mut self, limit: LoopLimit, mut after_spin: F) -> LoopStats
    where
        F: FnMut(&mut BridgeNode, u64) -> bool,
    {
        let mut out = LoopStats::default();
        let start = Instant::now();
        let mut deadline = start;
        loop {
            match &limit {
                LoopLimit::Cycles(n) if out.cycles >= *n => break,
                LoopLimit::UntilStopped(flag) if flag.load(Ordering::Relaxed) => break,
                _ => {}
            }
            let s = self.spin_once();
            out.cycles += 1;
            out.messages_processed += s.messages_processed;
            out.decode_errors += s.decode_errors;
            if s.duration > self.period {
                out.overruns += 1;
            }
            out.durations.push(s.duration);
            if !after_spin(self, out.cycles) {
                break;
            }
            deadline += self.period;
            let now = Instant::now();
            if deadline > now {
                thread::sleep(deadline - now);
            } else if now - deadline > self.period {
                // Fell more than a period behind: restart the schedule.
                deadline = now;
            }
        }
        out.elapsed = start.elapsed();
        out
    }

    /// Accepts peers on `addr` (use port 0 for an ephemeral port). Returns
    /// the bound address.
    pub fn listen<A: ToSocketAddrs>(&mut self, addr: A) -> Result<SocketAddr> {
        let listener = TcpListener::bind(addr).map_err(|e| BusError::Transport(format!("bind: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| BusError::Transport(e.to_string()))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| BusError::Transport(e.to_string()))?;
        let link = Link {
            inbound: self.inbound.clone(),
            peers: self.outlet.peers.clone(),
            stats: self.outlet.stats.clone(),
            shutdown: self.shutdown.clone(),
            node: self.name.clone(),
        };
        thread::Builder::new()
            .name(format!("{}-accept", self.name))
            .spawn(move || {
                while !link.shutdown.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            let _ = stream.set_nonblocking(false);
                            if let Err(e) = link.attach(stream, peer) {
                                link.stats.error(format!("accept {peer}: {e}"));
                            }
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            thread::sleep(Duration::from_millis(2));
                        }
                        Err(e) => {
                            link.stats.error(format!("accept failed: {e}"));
                            thread::sleep(Duration::from_millis(50));
                        }
                    }
                }
            })
            .map_err(|e| BusError::Transport(e.to_string()))?;
        log::info!("{} listening on {local}", self.name);
        Ok(local)
    }

    /// Opens a connection to a listening peer.
    pub fn connect<A: ToSocketAddrs>(&mut self, addr: A) -> Result<SocketAddr> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| BusError::Transport(format!("resolve: {e}")))?
            .collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
                Ok(stream) => {
                    let link = Link {
                        inbound: self.inbound.clone(),
                        peers: self.outlet.peers.clone(),
                        stats: self.outlet.stats.clone(),
                        shutdown: self.shutdown.clone(),
                        node: self.name.clone(),
                    };
                    link.attach(stream, a)
                        .map_err(|e| BusError::Transport(e.to_string()))?;
                    return Ok(a);
                }
                Err(e) => last = Some(format!("connect {a}: {e}")),
            }
        }
        let msg = last.unwrap_or_else(|| "no address to connect to".into());
        self.outlet.stats.error(msg.clone());
        Err(BusError::Transport(msg))
    }

    /// Disconnects every peer.
    pub fn close_peers(&mut self) {
        for p in lock(&self.outlet.peers.peers).drain(..) {
            let _ = p.stream.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for BridgeNode {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        for p in lock(&self.outlet.peers.peers).drain(..) {
            let _ = p.stream.shutdown(Shutdown::Both);
        }
        self.ctx.unregister(&self.name);
    }
}

/// Shared state handed to transport threads.
#[derive(Clone)]
struct Link {
    inbound: Arc<InboundQueue>,
    peers: Arc<PeerSet>,
    stats: Arc<TransportStats>,
    shutdown: Arc<AtomicBool>,
    node: String,
}

impl Link {
    fn attach(&self, stream: TcpStream, addr: SocketAddr) -> std::io::Result<()> {
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        let reader = stream.try_clone()?;
        let latched: Vec<Vec<u8>> = lock(&self.peers.latched).values().cloned().collect();
        for frame in &latched {
            writer.write_all(frame)?;
        }
        let id = self.peers.next_id.fetch_add(1, Ordering::Relaxed);
        lock(&self.peers.peers).push(Peer { id, addr, stream });
        self.stats.connections.fetch_add(1, Ordering::Relaxed);
        let link = self.clone();
        thread::Builder::new()
            .name(format!("{}-recv-{id}", self.node))
            .spawn(move || link.receive(reader, id, addr))?;
        Ok(())
    }

    fn receive(self, mut stream: TcpStream, id: u64, addr: SocketAddr) {
        let mut frames = FrameReader::new();
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            match stream.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    let received_ns = unix_now_ns();
                    frames.push(&buf[..n]);
                    while let Some(f) = frames.next_frame() {
                        match f {
                            Ok(bytes) => self.inbound.push(InboundFrame { bytes, received_ns }),
                            Err(_) => {
                                self.stats.framing_errors.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    if !self.shutdown.load(Ordering::Relaxed) {
                        self.stats.error(format!("read from {addr} failed: {e}"));
                    }
                    break;
                }
            }
        }
        lock(&self.peers.peers).retain(|p| p.id != id);
        log::debug!("{}: peer {addr} disconnected", self.node);
    }
}
