//! Observable scene: identified nodes, a transform hierarchy, mesh models,
//! message-value nodes and modification observers.
//!
//! The scene is single-owner. Every mutation increments the node's
//! `modified_count` and fires its observers synchronously. Mutations made
//! from inside an observer are queued and their observers run once the
//! current callback chain has finished.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::codec::SceneValue;
use crate::geometry::{compose, Mat4, Vec3};

pub type NodeId = String;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("node '{0}' not found")]
    NotFound(String),
    #[error("node '{0}' already exists")]
    Conflict(String),
    #[error("parenting '{child}' under '{parent}' would create a cycle")]
    Cycle { child: String, parent: String },
    #[error("node '{id}' is not a {expected}")]
    WrongKind { id: String, expected: &'static str },
    #[error("observer handle {0} not found")]
    StaleHandle(u64),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneNodeRecord {
    pub id: NodeId,
    pub name: String,
    pub class_tag: String,
    pub modified_count: u64,
}

impl SceneNodeRecord {
    pub fn new(id: impl Into<String>, name: impl Into<String>, class_tag: impl Into<String>) -> Self {
        SceneNodeRecord {
            id: id.into(),
            name: name.into(),
            class_tag: class_tag.into(),
            modified_count: 0,
        }
    }
}

/// Triangle mesh in meters. Triangles index into `vertices` and never repeat
/// an index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeshData {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl MeshData {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = MeshData { vertices, triangles };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v as usize >= n) {
                return Err(SceneError::InvalidMesh(format!(
                    "triangle {i} references a vertex outside 0..{n}"
                )));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(SceneError::InvalidMesh(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let t = self.triangles[i];
        [
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        ]
    }

    pub fn triangles_iter(&self) -> impl Iterator<Item = [Vec3; 3]> + '_ {
        (0..self.triangles.len()).map(|i| self.triangle(i))
    }

    /// Signed enclosed volume; positive for outward-facing closed meshes.
    pub fn signed_volume(&self) -> f64 {
        self.triangles_iter()
            .map(|[a, b, c]| a.dot(b.cross(c)) / 6.0)
            .sum()
    }

    pub fn transformed(&self, m: &Mat4) -> MeshData {
        MeshData {
            vertices: self.vertices.iter().map(|v| m.transform_point(*v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Radius of the smallest origin-centered sphere enclosing all vertices.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformNode {
    pub record: SceneNodeRecord,
    pub matrix: Mat4,
    pub parent_transform_id: Option<NodeId>,
}

impl TransformNode {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        TransformNode {
            record: SceneNodeRecord::new(id, name, "LinearTransformNode"),
            matrix: Mat4::IDENTITY,
            parent_transform_id: None,
        }
    }

    pub fn with_class(mut self, tag: impl Into<String>) -> Self {
        self.record.class_tag = tag.into();
        self
    }

    pub fn with_matrix(mut self, m: Mat4) -> Self {
        self.matrix = m;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelNode {
    pub record: SceneNodeRecord,
    pub mesh: MeshData,
    pub color: [f64; 3],
    pub opacity: f64,
    pub parent_transform_id: Option<NodeId>,
}

impl ModelNode {
    pub fn new(id: impl Into<String>, name: impl Into<String>, mesh: MeshData) -> Self {
        ModelNode {
            record: SceneNodeRecord::new(id, name, "ModelNode"),
            mesh,
            color: [0.8, 0.8, 0.8],
            opacity: 1.0,
            parent_transform_id: None,
        }
    }
}

/// Holds the most recent converted message of a subscriber.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNode {
    pub record: SceneNodeRecord,
    pub value: Option<SceneValue>,
    /// Message stamp, nanoseconds since the Unix epoch.
    pub stamp_ns: i64,
    /// Arrival time at this process, same clock.
    pub received_ns: i64,
}

impl ValueNode {
    pub fn new(id: impl Into<String>, name: impl Into<String>, class_tag: impl Into<String>) -> Self {
        ValueNode {
            record: SceneNodeRecord::new(id, name, class_tag),
            value: None,
            stamp_ns: 0,
            received_ns: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneNode {
    Transform(TransformNode),
    Model(ModelNode),
    Value(ValueNode),
}

impl SceneNode {
    pub fn record(&self) -> &SceneNodeRecord {
        match self {
            SceneNode::Transform(n) => &n.record,
            SceneNode::Model(n) => &n.record,
            SceneNode::Value(n) => &n.record,
        }
    }

    fn record_mut(&mut self) -> &mut SceneNodeRecord {
        match self {
            SceneNode::Transform(n) => &mut n.record,
            SceneNode::Model(n) => &mut n.record,
            SceneNode::Value(n) => &mut n.record,
        }
    }

    pub fn id(&self) -> &str {
        &self.record().id
    }

    pub fn parent_transform_id(&self) -> Option<&str> {
        match self {
            SceneNode::Transform(n) => n.parent_transform_id.as_deref(),
            SceneNode::Model(n) => n.parent_transform_id.as_deref(),
            SceneNode::Value(_) => None,
        }
    }

    fn parent_slot(&mut self) -> Option<&mut Option<NodeId>> {
        match self {
            SceneNode::Transform(n) => Some(&mut n.parent_transform_id),
            SceneNode::Model(n) => Some(&mut n.parent_transform_id),
            SceneNode::Value(_) => None,
        }
    }
}

impl From<TransformNode> for SceneNode {
    fn from(n: TransformNode) -> Self {
        SceneNode::Transform(n)
    }
}

impl From<ModelNode> for SceneNode {
    fn from(n: ModelNode) -> Self {
        SceneNode::Model(n)
    }
}

impl From<ValueNode> for SceneNode {
    fn from(n: ValueNode) -> Self {
        SceneNode::Value(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneEvent {
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObserverHandle {
    pub id: u64,
    pub node_id: NodeId,
    pub event: SceneEvent,
}

pub type ObserverFn = Box<dyn FnMut(&mut Scene, &str)>;

struct ObserverEntry {
    handle: u64,
    node_id: NodeId,
    // None while the callback is executing.
    callback: Option<ObserverFn>,
}

#[derive(Default)]
pub struct Scene {
    nodes: HashMap<NodeId, SceneNode>,
    order: Vec<NodeId>,
    observers: Vec<ObserverEntry>,
    next_handle: u64,
    next_auto_id: u64,
    pending: VecDeque<NodeId>,
    dispatching: bool,
}

impl fmt::Debug for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scene")
            .field("nodes", &self.order)
            .field("observers", &self.observers.len())
            .finish()
    }
}

impl Scene {
    pub fn new() -> Self {
        Scene::default()
    }

    /// Fresh id of the form `<prefix><n>` not yet used in this scene.
    pub fn unique_id(&mut self, prefix: &str) -> NodeId {
        loop {
            self.next_auto_id += 1;
            let id = format!("{prefix}{}", self.next_auto_id);
            if !self.nodes.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    /// Node ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SceneNode> {
        self.order.iter().filter_map(|id| self.nodes.get(id))
    }

    pub fn add_node(&mut self, node: impl Into<SceneNode>) -> Result<NodeId> {
        let mut node = node.into();
        let id = node.id().to_string();
        if self.nodes.contains_key(&id) {
            return Err(SceneError::Conflict(id));
        }
        if let Some(p) = node.parent_transform_id() {
            if !matches!(self.nodes.get(p), Some(SceneNode::Transform(_))) {
                return Err(SceneError::NotFound(p.to_string()));
            }
        }
        node.record_mut().modified_count = 0;
        self.nodes.insert(id.clone(), node);
        self.order.push(id.clone());
        Ok(id)
    }

    pub fn get_node(&self, id: &str) -> Result<&SceneNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| SceneError::NotFound(id.to_string()))
    }

    pub fn transform(&self, id: &str) -> Result<&TransformNode> {
        match self.get_node(id)? {
            SceneNode::Transform(n) => Ok(n),
            _ => Err(SceneError::WrongKind {
                id: id.to_string(),
                expected: "transform node",
            }),
        }
    }

    pub fn model(&self, id: &str) -> Result<&ModelNode> {
        match self.get_node(id)? {
            SceneNode::Model(n) => Ok(n),
            _ => Err(SceneError::WrongKind {
                id: id.to_string(),
                expected: "model node",
            }),
        }
    }

    pub fn value(&self, id: &str) -> Result<&ValueNode> {
        match self.get_node(id)? {
            SceneNode::Value(n) => Ok(n),
            _ => Err(SceneError::WrongKind {
                id: id.to_string(),
                expected: "value node",
            }),
        }
    }

    /// Detaches a node. Children lose their parent reference but keep their
    /// local matrices; observers of the node are dropped.
    pub fn remove_node(&mut self, id: &str) -> Result<SceneNode> {
        let node = self
            .nodes
            .remove(id)
            .ok_or_else(|| SceneError::NotFound(id.to_string()))?;
        self.order.retain(|x| x != id);
        self.observers.retain(|o| o.node_id != id);
        let orphans: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| n.parent_transform_id() == Some(id))
            .map(|n| n.id().to_string())
            .collect();
        for child in orphans {
            if let Some(slot) = self.nodes.get_mut(&child).and_then(SceneNode::parent_slot) {
                *slot = None;
            }
            self.bump(&child);
        }
        Ok(node)
    }

    /// Re-parents a transform or model node under a transform node, or
    /// detaches it when `parent` is `None`. The child's local matrix is kept.
    pub fn set_parent(&mut self, child: &str, parent: Option<&str>) -> Result<()> {
        if !self.nodes.contains_key(child) {
            return Err(SceneError::NotFound(child.to_string()));
        }
        if let Some(p) = parent {
            match self.nodes.get(p) {
                None => return Err(SceneError::NotFound(p.to_string())),
                Some(SceneNode::Transform(_)) => {}
                Some(_) => {
                    return Err(SceneError::WrongKind {
                        id: p.to_string(),
                        expected: "transform node",
                    })
                }
            }
            // Walk up from the new parent; meeting the child means a cycle.
            let mut cur = Some(p.to_string());
            while let Some(c) = cur {
                if c == child {
                    return Err(SceneError::Cycle {
                        child: child.to_string(),
                        parent: p.to_string(),
                    });
                }
                cur = self
                    .nodes
                    .get(&c)
                    .and_then(|n| n.parent_transform_id())
                    .map(str::to_string);
            }
        }
        let slot = self
            .nodes
            .get_mut(child)
            .and_then(SceneNode::parent_slot)
            .ok_or(SceneError::WrongKind {
                id: child.to_string(),
                expected: "transform-bearing node",
            })?;
        *slot = parent.map(str::to_string);
        self.bump(child);
        Ok(())
    }

    /// Composition of the ancestor chain, root first. Model nodes report
    /// their parent's world transform.
    pub fn world_transform(&self, id: &str) -> Result<Mat4> {
        let node = self.get_node(id)?;
        let mut m = match node {
            SceneNode::Transform(t) => t.matrix,
            SceneNode::Model(_) => Mat4::IDENTITY,
            SceneNode::Value(_) => {
                return Err(SceneError::WrongKind {
                    id: id.to_string(),
                    expected: "transform-bearing node",
                })
            }
        };
        let mut parent = node.parent_transform_id();
        while let Some(p) = parent {
            let pn = self.transform(p)?;
            m = compose(&pn.matrix, &m);
            parent = pn.parent_transform_id.as_deref();
        }
        Ok(m)
    }

    pub fn set_matrix(&mut self, id: &str, m: Mat4) -> Result<()> {
        match self.nodes.get_mut(id) {
            Some(SceneNode::Transform(t)) => t.matrix = m,
            Some(_) => {
                return Err(SceneError::WrongKind {
                    id: id.to_string(),
                    expected: "transform node",
                })
            }
            None => return Err(SceneError::NotFound(id.to_string())),
        }
        self.bump(id);
        Ok(())
    }

    pub fn set_value(
        &mut self,
        id: &str,
        value: SceneValue,
        stamp_ns: i64,
        received_ns: i64,
    ) -> Result<()> {
        match self.nodes.get_mut(id) {
            Some(SceneNode::Value(v)) => {
                v.value = Some(value);
                v.stamp_ns = stamp_ns;
                v.received_ns = received_ns;
            }
            Some(_) => {
                return Err(SceneError::WrongKind {
                    id: id.to_string(),
                    expected: "value node",
                })
            }
            None => return Err(SceneError::NotFound(id.to_string())),
        }
        self.bump(id);
        Ok(())
    }

    /// Applies an arbitrary edit and counts it as one modification.
    pub fn modify<F>(&mut self, id: &str, edit: F) -> Result<()>
    where
        F: FnOnce(&mut SceneNode),
    {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| SceneError::NotFound(id.to_string()))?;
        let parent_before = node.parent_transform_id().map(str::to_string);
        edit(node);
        if node.parent_transform_id().map(str::to_string) != parent_before {
            // Parent changes must go through set_parent so cycles are caught.
            if let Some(slot) = node.parent_slot() {
                *slot = parent_before;
            }
        }
        self.bump(id);
        Ok(())
    }

    pub fn observe_modified<F>(&mut self, id: &str, callback: F) -> Result<ObserverHandle>
    where
        F: FnMut(&mut Scene, &str) + 'static,
    {
        if !self.nodes.contains_key(id) {
            return Err(SceneError::NotFound(id.to_string()));
        }
        self.next_handle += 1;
        self.observers.push(ObserverEntry {
            handle: self.next_handle,
            node_id: id.to_string(),
            callback: Some(Box::new(callback)),
        });
        Ok(ObserverHandle {
            id: self.next_handle,
            node_id: id.to_string(),
            event: SceneEvent::Modified,
        })
    }

    pub fn unobserve(&mut self, handle: &ObserverHandle) -> Result<()> {
        let idx = self
            .observers
            .iter()
            .position(|o| o.handle == handle.id)
            .ok_or(SceneError::StaleHandle(handle.id))?;
        self.observers.remove(idx);
        Ok(())
    }

    pub fn observer_count(&self, id: &str) -> usize {
        self.observers.iter().filter(|o| o.node_id == id).count()
    }

    fn bump(&mut self, id: &str) {
        if let Some(n) = self.nodes.get_mut(id) {
            n.record_mut().modified_count += 1;
        }
        self.pending.push_back(id.to_string());
        if self.dispatching {
            return;
        }
        self.dispatching = true;
        while let Some(id) = self.pending.pop_front() {
            let handles: Vec<u64> = self
                .observers
                .iter()
                .filter(|o| o.node_id == id)
                .map(|o| o.handle)
                .collect();
            for h in handles {
                let Some(idx) = self.observers.iter().position(|o| o.handle == h) else {
                    continue;
                };
                let Some(mut cb) = self.observers[idx].callback.take() else {
                    continue;
                };
                cb(self, &id);
                if let Some(idx) = self.observers.iter().position(|o| o.handle == h) {
                    self.observers[idx].callback = Some(cb);
                }
            }
        }
        self.dispatching = false;
    }
}
