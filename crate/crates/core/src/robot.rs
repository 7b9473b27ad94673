//! URDF subset parsing, STL loading, primitive tessellation, forward
//! kinematics, the joint-state driven state publisher and robot nodes that
//! populate the scene from a monitored robot description.

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use roxmltree::{Document, Node};
use serde::Serialize;
use thiserror::Error;

use crate::bus::{BridgeNode, BusError, ParameterMonitor, TfBroadcaster};
use crate::codec::JointState;
use crate::geometry::{compose, rpy_to_matrix, Mat4, Vec3};
use crate::scene::{MeshData, ModelNode, NodeId, TransformNode};
use crate::tf::TransformStamped;

pub const DEFAULT_DESCRIPTION_PARAM: &str = "robot_description";
pub const JOINT_STATES_TOPIC: &str = "/joint_states";
pub const MERGE_TOLERANCE: f64 = 1e-9;
pub const CYLINDER_SEGMENTS: usize = 32;
pub const SPHERE_STACKS: usize = 16;
pub const SPHERE_SLICES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UrdfErrorKind {
    MalformedXml,
    MissingElement,
    MissingAttribute,
    InvalidValue,
    DuplicateName,
    UnknownLink,
    UnsupportedJoint,
    MissingLimits,
    MultipleParents,
    Cycle,
    NoRoot,
    MultipleRoots,
}

impl fmt::Display for UrdfErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        let name = s.as_ref().and_then(|v| v.as_str()).unwrap_or("error");
        f.write_str(&name.replace('_', " "))
    }
}

/// URDF parse error with 1-based line and column of the offending element.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("{line}:{column}: {kind}: {message}")]
pub struct UrdfError {
    pub kind: UrdfErrorKind,
    pub line: u32,
    pub column: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StlError {
    #[error("truncated STL: {0}")]
    Truncated(String),
    #[error("STL triangle count mismatch: header says {declared}, file holds {actual} bytes of records")]
    CountMismatch { declared: u32, actual: usize },
    #[error("ASCII STL line {line}: {message}")]
    Grammar { line: usize, message: String },
    #[error("invalid STL: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobotError {
    #[error(transparent)]
    Urdf(#[from] UrdfError),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error("joint '{joint}' position {q} outside limits [{lower}, {upper}]")]
    Limit {
        joint: String,
        q: f64,
        lower: f64,
        upper: f64,
    },
    #[error("unknown joint '{0}'")]
    UnknownJoint(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("mesh '{0}' not found")]
    MeshNotFound(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, RobotError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Geometry {
    Mesh { path: String, scale: Vec3 },
    Box { size: Vec3 },
    Cylinder { radius: f64, length: f64 },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Visual {
    pub geometry: Geometry,
    pub xyz: Vec3,
    pub rpy: Vec3,
    pub color: [f64; 4],
}

impl Visual {
    pub fn origin(&self) -> Mat4 {
        origin_matrix(self.xyz, self.rpy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UrdfLink {
    pub name: String,
    pub visuals: Vec<Visual>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Fixed,
    Revolute,
    Continuous,
    Prismatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UrdfJoint {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    pub xyz: Vec3,
    pub rpy: Vec3,
    pub axis: Vec3,
    pub limits: Option<JointLimits>,
}

impl UrdfJoint {
    pub fn origin(&self) -> Mat4 {
        origin_matrix(self.xyz, self.rpy)
    }
}

/// Parsed robot. `joints` are stored in tree order: every joint comes after
/// the joint that produces its parent link.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<UrdfLink>,
    pub joints: Vec<UrdfJoint>,
    pub root: String,
    pub warnings: Vec<String>,
}

impl RobotModel {
    pub fn link(&self, name: &str) -> Option<&UrdfLink> {
        self.links.iter().find(|l| l.name == name)
    }

    pub fn joint(&self, name: &str) -> Option<&UrdfJoint> {
        self.joints.iter().find(|j| j.name == name)
    }

    pub fn visual_count(&self) -> usize {
        self.links.iter().map(|l| l.visuals.len()).sum()
    }

    pub fn movable_joints(&self) -> impl Iterator<Item = &UrdfJoint> {
        self.joints.iter().filter(|j| j.kind != JointKind::Fixed)
    }
}

fn origin_matrix(xyz: Vec3, rpy: Vec3) -> Mat4 {
    rpy_to_matrix(rpy.x, rpy.y, rpy.z).with_translation(xyz)
}

struct Locator<'a> {
    doc: &'a Document<'a>,
}

impl Locator<'_> {
    fn err(&self, node: Node, kind: UrdfErrorKind, message: impl Into<String>) -> UrdfError {
        let pos = self.doc.text_pos_at(node.range().start);
        UrdfError {
            kind,
            line: pos.row,
            column: pos.col,
            message: message.into(),
        }
    }

    fn attr<'n>(&self, node: Node<'n, 'n>, name: &str) -> std::result::Result<&'n str, UrdfError> {
        node.attribute(name).ok_or_else(|| {
            self.err(
                node,
                UrdfErrorKind::MissingAttribute,
                format!("<{}> needs attribute '{name}'", node.tag_name().name()),
            )
        })
    }

    fn number(&self, node: Node, name: &str, text: &str) -> std::result::Result<f64, UrdfError> {
        text.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(node, UrdfErrorKind::InvalidValue, format!("'{name}' is not a number: '{text}'")))
    }

    fn numbers(&self, node: Node, name: &str, n: usize) -> std::result::Result<Option<Vec<f64>>, UrdfError> {
        let Some(text) = node.attribute(name) else {
            return Ok(None);
        };
        let vals = text
            .split_whitespace()
            .map(|t| self.number(node, name, t))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if vals.len() != n {
            return Err(self.err(
                node,
                UrdfErrorKind::InvalidValue,
                format!("'{name}' needs {n} numbers, got {}", vals.len()),
            ));
        }
        Ok(Some(vals))
    }

    fn vec3(&self, node: Node, name: &str) -> std::result::Result<Option<Vec3>, UrdfError> {
        Ok(self.numbers(node, name, 3)?.map(|v| Vec3::new(v[0], v[1], v[2])))
    }

    fn positive(&self, node: Node, name: &str) -> std::result::Result<f64, UrdfError> {
        let v = self.number(node, name, self.attr(node, name)?)?;
        if v <= 0.0 {
            return Err(self.err(node, UrdfErrorKind::InvalidValue, format!("'{name}' must be positive")));
        }
        Ok(v)
    }

    fn origin(&self, parent: Node) -> std::result::Result<(Vec3, Vec3), UrdfError> {
        match child(parent, "origin") {
            Some(o) => Ok((
                self.vec3(o, "xyz")?.unwrap_or(Vec3::ZERO),
                self.vec3(o, "rpy")?.unwrap_or(Vec3::ZERO),
            )),
            None => Ok((Vec3::ZERO, Vec3::ZERO)),
        }
    }
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.tag_name().name() == name)
}

const DEFAULT_COLOR: [f64; 4] = [0.8, 0.8, 0.8, 1.0];

/// Parses the supported URDF subset.
pub fn parse_urdf(xml: &str) -> std::result::Result<RobotModel, UrdfError> {
    let doc = Document::parse(xml).map_err(|e| {
        let pos = e.pos();
        UrdfError {
            kind: UrdfErrorKind::MalformedXml,
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;
    let loc = Locator { doc: &doc };
    let robot = doc.root_element();
    if robot.tag_name().name() != "robot" {
        return Err(loc.err(robot, UrdfErrorKind::MissingElement, "root element must be <robot>"));
    }
    let name = robot.attribute("name").unwrap_or_default().to_string();
    let mut warnings = Vec::new();
    let warn = |warnings: &mut Vec<String>, n: Node, context: &str| {
        let p = doc.text_pos_at(n.range().start);
        warnings.push(format!(
            "{}:{}: skipped <{}> in {context}",
            p.row,
            p.col,
            n.tag_name().name()
        ));
    };

    let mut materials: HashMap<String, [f64; 4]> = HashMap::new();
    for m in robot.children().filter(|c| c.has_tag_name("material")) {
        if let (Some(n), Some(c)) = (m.attribute("name"), child(m, "color")) {
            if let Some(rgba) = loc.numbers(c, "rgba", 4)? {
                materials.insert(n.to_string(), [rgba[0], rgba[1], rgba[2], rgba[3]]);
            }
        }
    }

    let mut links = Vec::new();
    let mut link_nodes = HashMap::new();
    let mut joint_specs: Vec<(UrdfJoint, Node)> = Vec::new();
    for el in robot.children().filter(Node::is_element) {
        match el.tag_name().name() {
            "link" => {
                let lname = loc.attr(el, "name")?.to_string();
                if link_nodes.insert(lname.clone(), el).is_some() {
                    return Err(loc.err(el, UrdfErrorKind::DuplicateName, format!("duplicate link '{lname}'")));
                }
                let mut visuals = Vec::new();
                for c in el.children().filter(Node::is_element) {
                    if c.tag_name().name() == "visual" {
                        visuals.push(parse_visual(&loc, c, &materials)?);
                    } else {
                        warn(&mut warnings, c, &format!("link '{lname}'"));
                    }
                }
                links.push(UrdfLink { name: lname, visuals });
            }
            "joint" => joint_specs.push((parse_joint(&loc, el)?, el)),
            "material" => {}
            _ => warn(&mut warnings, el, "robot"),
        }
    }

    let mut joint_names = HashSet::new();
    let mut parent_of: HashMap<&str, usize> = HashMap::new();
    for (i, (j, el)) in joint_specs.iter().enumerate() {
        if !joint_names.insert(j.name.as_str()) {
            return Err(loc.err(*el, UrdfErrorKind::DuplicateName, format!("duplicate joint '{}'", j.name)));
        }
        for l in [&j.parent, &j.child] {
            if !link_nodes.contains_key(l) {
                return Err(loc.err(
                    *el,
                    UrdfErrorKind::UnknownLink,
                    format!("joint '{}' references unknown link '{l}'", j.name),
                ));
            }
        }
        if parent_of.insert(j.child.as_str(), i).is_some() {
            return Err(loc.err(
                *el,
                UrdfErrorKind::MultipleParents,
                format!("link '{}' is the child of more than one joint", j.child),
            ));
        }
    }
    for (j, el) in &joint_specs {
        let mut cur = j.parent.as_str();
        let mut steps = 0;
        loop {
            if cur == j.child {
                return Err(loc.err(
                    *el,
                    UrdfErrorKind::Cycle,
                    format!("joint '{}' makes link '{}' its own ancestor", j.name, j.child),
                ));
            }
            match parent_of.get(cur) {
                Some(&k) if steps <= joint_specs.len() => {
                    cur = joint_specs[k].0.parent.as_str();
                    steps += 1;
                }
                _ => break,
            }
        }
    }
    let roots: Vec<&UrdfLink> = links.iter().filter(|l| !parent_of.contains_key(l.name.as_str())).collect();
    let root = match roots.as_slice() {
        [] => return Err(loc.err(robot, UrdfErrorKind::NoRoot, "no root link")),
        [r] => r.name.clone(),
        [_, second, ..] => {
            return Err(loc.err(
                link_nodes[&second.name],
                UrdfErrorKind::MultipleRoots,
                format!(
                    "multiple root links: {}",
                    roots.iter().map(|l| l.name.as_str()).collect::<Vec<_>>().join(", ")
                ),
            ))
        }
    };

    let mut children: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, (j, _)) in joint_specs.iter().enumerate() {
        children.entry(j.parent.as_str()).or_default().push(i);
    }
    // Breadth-first from the root so parents always precede children.
    let mut order = Vec::with_capacity(joint_specs.len());
    let mut queue = std::collections::VecDeque::from([root.as_str()]);
    while let Some(l) = queue.pop_front() {
        for &i in children.get(l).map(Vec::as_slice).unwrap_or(&[]) {
            order.push(i);
            queue.push_back(joint_specs[i].0.child.as_str());
        }
    }
    let mut slots: Vec<Option<UrdfJoint>> = joint_specs.iter().map(|(j, _)| Some(j.clone())).collect();
    let joints = order.into_iter().filter_map(|i| slots[i].take()).collect();

    Ok(RobotModel {
        name,
        links,
        joints,
        root,
        warnings,
    })
}

fn parse_visual(
    loc: &Locator,
    el: Node,
    materials: &HashMap<String, [f64; 4]>,
) -> std::result::Result<Visual, UrdfError> {
    let (xyz, rpy) = loc.origin(el)?;
    let g = child(el, "geometry")
        .ok_or_else(|| loc.err(el, UrdfErrorKind::MissingElement, "<visual> needs <geometry>"))?;
    let shape = g
        .children()
        .find(Node::is_element)
        .ok_or_else(|| loc.err(g, UrdfErrorKind::MissingElement, "<geometry> is empty"))?;
    let geometry = match shape.tag_name().name() {
        "mesh" => Geometry::Mesh {
            path: loc.attr(shape, "filename")?.to_string(),
            scale: loc.vec3(shape, "scale")?.unwrap_or(Vec3::new(1.0, 1.0, 1.0)),
        },
        "box" => {
            let size = loc
                .vec3(shape, "size")?
                .ok_or_else(|| loc.err(shape, UrdfErrorKind::MissingAttribute, "<box> needs attribute 'size'"))?;
            if size.x <= 0.0 || size.y <= 0.0 || size.z <= 0.0 {
                return Err(loc.err(shape, UrdfErrorKind::InvalidValue, "box size must be positive"));
            }
            Geometry::Box { size }
        }
        "cylinder" => Geometry::Cylinder {
            radius: loc.positive(shape, "radius")?,
            length: loc.positive(shape, "length")?,
        },
        "sphere" => Geometry::Sphere {
            radius: loc.positive(shape, "radius")?,
        },
        other => {
            return Err(loc.err(shape, UrdfErrorKind::InvalidValue, format!("unsupported geometry <{other}>")))
        }
    };
    let mut color = DEFAULT_COLOR;
    if let Some(m) = child(el, "material") {
        if let Some(c) = child(m, "color") {
            if let Some(v) = loc.numbers(c, "rgba", 4)? {
                color = [v[0], v[1], v[2], v[3]];
            }
        } else if let Some(c) = m.attribute("name").and_then(|n| materials.get(n)) {
            color = *c;
        }
    }
    Ok(Visual {
        geometry,
        xyz,
        rpy,
        color,
    })
}

fn parse_joint(loc: &Locator, el: Node) -> std::result::Result<UrdfJoint, UrdfError> {
    let name = loc.attr(el, "name")?.to_string();
    let kind = match loc.attr(el, "type")? {
        "fixed" => JointKind::Fixed,
        "revolute" => JointKind::Revolute,
        "continuous" => JointKind::Continuous,
        "prismatic" => JointKind::Prismatic,
        other => {
            return Err(loc.err(
                el,
                UrdfErrorKind::UnsupportedJoint,
                format!("joint '{name}' has unsupported type '{other}'"),
            ))
        }
    };
    let link_ref = |tag: &str| -> std::result::Result<String, UrdfError> {
        let c = child(el, tag)
            .ok_or_else(|| loc.err(el, UrdfErrorKind::MissingElement, format!("joint '{name}' needs <{tag}>")))?;
        Ok(loc.attr(c, "link")?.to_string())
    };
    let parent = link_ref("parent")?;
    let child_link = link_ref("child")?;
    let (xyz, rpy) = loc.origin(el)?;
    let axis = match child(el, "axis") {
        Some(a) => {
            let v = loc.vec3(a, "xyz")?.unwrap_or(Vec3::X);
            v.normalized()
                .map_err(|_| loc.err(a, UrdfErrorKind::InvalidValue, format!("joint '{name}' has a zero axis")))?
        }
        None => Vec3::X,
    };
    let limits = match child(el, "limit") {
        Some(l) if matches!(kind, JointKind::Revolute | JointKind::Prismatic) => {
            let get = |n: &str| -> std::result::Result<f64, UrdfError> {
                match l.attribute(n) {
                    Some(t) => loc.number(l, n, t),
                    None => Err(loc.err(
                        l,
                        UrdfErrorKind::MissingLimits,
                        format!("joint '{name}' limit needs '{n}'"),
                    )),
                }
            };
            let (lower, upper) = (get("lower")?, get("upper")?);
            if lower > upper {
                return Err(loc.err(
                    l,
                    UrdfErrorKind::InvalidValue,
                    format!("joint '{name}' has lower {lower} > upper {upper}"),
                ));
            }
            Some(JointLimits { lower, upper })
        }
        None if matches!(kind, JointKind::Revolute | JointKind::Prismatic) => {
            return Err(loc.err(el, UrdfErrorKind::MissingLimits, format!("joint '{name}' needs <limit>")))
        }
        _ => None,
    };
    Ok(UrdfJoint {
        name,
        kind,
        parent,
        child: child_link,
        xyz,
        rpy,
        axis,
        limits,
    })
}

/// Origin transform composed with the joint motion for position `q`.
pub fn joint_transform(j: &UrdfJoint, q: f64) -> Result<Mat4> {
    if let Some(l) = j.limits {
        if !(l.lower..=l.upper).contains(&q) {
            return Err(RobotError::Limit {
                joint: j.name.clone(),
                q,
                lower: l.lower,
                upper: l.upper,
            });
        }
    }
    if !q.is_finite() {
        return Err(RobotError::InvalidInput(format!("joint '{}' position is not finite", j.name)));
    }
    let origin = j.origin();
    let motion = match j.kind {
        JointKind::Fixed => return Ok(origin),
        JointKind::Revolute | JointKind::Continuous => {
            Mat4::from_axis_angle(j.axis, q).map_err(|e| RobotError::InvalidInput(e.to_string()))?
        }
        JointKind::Prismatic => Mat4::from_translation(j.axis * q),
    };
    Ok(compose(&origin, &motion))
}

fn position_of(positions: &HashMap<String, f64>, j: &UrdfJoint) -> f64 {
    positions.get(&j.name).copied().unwrap_or(0.0)
}

/// Link poses in the root frame. Missing joints default to 0.
pub fn forward_kinematics(model: &RobotModel, positions: &HashMap<String, f64>) -> Result<BTreeMap<String, Mat4>> {
    let mut out = BTreeMap::new();
    out.insert(model.root.clone(), Mat4::IDENTITY);
    for j in &model.joints {
        let parent = *out
            .get(&j.parent)
            .ok_or_else(|| RobotError::InvalidInput(format!("joint '{}' out of tree order", j.name)))?;
        let t = joint_transform(j, position_of(positions, j))?;
        out.insert(j.child.clone(), compose(&parent, &t));
    }
    Ok(out)
}

fn mesh_err(msg: impl Into<String>) -> RobotError {
    RobotError::InvalidInput(msg.into())
}

/// Builds an index-valid mesh, merging vertices closer than
/// [`MERGE_TOLERANCE`] and dropping triangles that collapse.
pub fn merge_triangles(tris: &[[Vec3; 3]]) -> MeshData {
    let cell = |v: f64| (v / MERGE_TOLERANCE).floor() as i64;
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles = Vec::new();
    for t in tris {
        let mut idx = [0u32; 3];
        for (k, &v) in t.iter().enumerate() {
            let c = (cell(v.x), cell(v.y), cell(v.z));
            let mut found = None;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(ids) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            if let Some(&i) = ids.iter().find(|&&i| vertices[i as usize].distance(v) <= MERGE_TOLERANCE) {
                                found = Some(i);
                                break 'search;
                            }
                        }
                    }
                }
            }
            idx[k] = found.unwrap_or_else(|| {
                let i = vertices.len() as u32;
                vertices.push(v);
                grid.entry(c).or_default().push(i);
                i
            });
        }
        if idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2] {
            triangles.push(idx);
        }
    }
    MeshData { vertices, triangles }
}

/// Parses binary or ASCII STL.
pub fn load_stl(bytes: &[u8]) -> std::result::Result<MeshData, StlError> {
    let binary_len = |n: usize| 84 + 50 * n;
    if bytes.len() >= 84 {
        let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
        if bytes.len() == binary_len(n) {
            return parse_binary_stl(bytes, n);
        }
    }
    let trimmed = bytes.iter().skip_while(|b| b.is_ascii_whitespace());
    if trimmed.take(5).copied().eq(b"solid".iter().copied()) {
        if let Ok(text) = std::str::from_utf8(bytes) {
            return parse_ascii_stl(text);
        }
    }
    if bytes.len() < 84 {
        return Err(StlError::Truncated(format!("{} bytes, binary header needs 84", bytes.len())));
    }
    let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]);
    let body = bytes.len() - 84;
    if body < 50 * n as usize {
        Err(StlError::Truncated(format!(
            "{n} triangles declared, data ends inside record {}",
            body / 50
        )))
    } else {
        Err(StlError::CountMismatch { declared: n, actual: body })
    }
}

fn parse_binary_stl(bytes: &[u8], n: usize) -> std::result::Result<MeshData, StlError> {
    let f = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64;
    let mut tris = Vec::with_capacity(n);
    for i in 0..n {
        let base = 84 + 50 * i + 12;
        let mut t = [Vec3::ZERO; 3];
        for (k, v) in t.iter_mut().enumerate() {
            let o = base + 12 * k;
            *v = Vec3::new(f(o), f(o + 4), f(o + 8));
            if !v.is_finite() {
                return Err(StlError::Invalid(format!("non-finite vertex in triangle {i}")));
            }
        }
        tris.push(t);
    }
    Ok(merge_triangles(&tris))
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn line(&self) -> usize {
        self.items
            .get(self.pos.min(self.items.len().saturating_sub(1)))
            .map_or(1, |t| t.0)
    }

    fn err(&self, message: String) -> StlError {
        StlError::Grammar {
            line: self.line(),
            message,
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let t = self.items.get(self.pos).copied();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: &str) -> std::result::Result<(), StlError> {
        match self.next() {
            Some((_, t)) if t == want => Ok(()),
            Some((line, t)) => Err(StlError::Grammar {
                line,
                message: format!("expected '{want}', found '{t}'"),
            }),
            None => Err(self.err(format!("expected '{want}', found end of file"))),
        }
    }

    fn number(&mut self) -> std::result::Result<f64, StlError> {
        match self.next() {
            Some((line, t)) => t
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| StlError::Grammar {
                    line,
                    message: format!("'{t}' is not a number"),
                }),
            None => Err(self.err("expected a number, found end of file".into())),
        }
    }
}

fn parse_ascii_stl(text: &str) -> std::result::Result<MeshData, StlError> {
    let mut items: Vec<(usize, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut words = line.split_whitespace();
        match words.next() {
            // Solid names run to the end of their line.
            Some(w @ ("solid" | "endsolid")) => items.push((i + 1, w)),
            Some(w) => {
                items.push((i + 1, w));
                items.extend(words.map(|t| (i + 1, t)));
            }
            None => {}
        }
    }
    let mut tok = Tokens { items, pos: 0 };
    tok.expect("solid")?;
    let mut tris = Vec::new();
    loop {
        match tok.next() {
            Some((_, "endsolid")) => break,
            Some((_, "facet")) => {
                tok.expect("normal")?;
                for _ in 0..3 {
                    tok.number()?;
                }
                tok.expect("outer")?;
                tok.expect("loop")?;
                let mut t = [Vec3::ZERO; 3];
                for v in t.iter_mut() {
                    tok.expect("vertex")?;
                    *v = Vec3::new(tok.number()?, tok.number()?, tok.number()?);
                }
                tok.expect("endloop")?;
                tok.expect("endfacet")?;
                tris.push(t);
            }
            Some((line, t)) => {
                return Err(StlError::Grammar {
                    line,
                    message: format!("expected 'facet' or 'endsolid', found '{t}'"),
                })
            }
            None => return Err(tok.err("missing 'endsolid'".into())),
        }
    }
    Ok(merge_triangles(&tris))
}

/// Watertight, outward-wound mesh for a URDF primitive, centered at the
/// origin. Cylinders run along z.
pub fn tessellate(g: &Geometry) -> Result<MeshData> {
    match g {
        Geometry::Box { size } => {
            if !(size.x > 0.0 && size.y > 0.0 && size.z > 0.0) {
                return Err(mesh_err("box dimensions must be positive"));
            }
            Ok(box_mesh(*size))
        }
        Geometry::Cylinder { radius, length } => {
            if !(*radius > 0.0 && *length > 0.0) {
                return Err(mesh_err("cylinder dimensions must be positive"));
            }
            Ok(cylinder_mesh(*radius, *length, CYLINDER_SEGMENTS))
        }
        Geometry::Sphere { radius } => {
            if !(*radius > 0.0) {
                return Err(mesh_err("sphere radius must be positive"));
            }
            Ok(sphere_mesh(*radius, SPHERE_STACKS, SPHERE_SLICES))
        }
        Geometry::Mesh { .. } => Err(mesh_err("mesh geometry is loaded from file, not tessellated")),
    }
}

fn box_mesh(size: Vec3) -> MeshData {
    let h = size * 0.5;
    let vertices = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            )
        })
        .collect();
    let triangles = vec![
        [0, 2, 1], [1, 2, 3], // -z
        [4, 5, 6], [5, 7, 6], // +z
        [0, 1, 4], [1, 5, 4], // -y
        [2, 6, 3], [3, 6, 7], // +y
        [0, 4, 2], [2, 4, 6], // -x
        [1, 3, 5], [3, 7, 5], // +x
    ];
    MeshData { vertices, triangles }
}

fn cylinder_mesh(r: f64, len: f64, n: usize) -> MeshData {
    let hz = len / 2.0;
    let mut vertices = vec![Vec3::new(0.0, 0.0, -hz), Vec3::new(0.0, 0.0, hz)];
    for z in [-hz, hz] {
        for i in 0..n {
            let a = 2.0 * PI * i as f64 / n as f64;
            vertices.push(Vec3::new(r * a.cos(), r * a.sin(), z));
        }
    }
    let b = |i: usize| (2 + i % n) as u32;
    let t = |i: usize| (2 + n + i % n) as u32;
    let mut triangles = Vec::with_capacity(4 * n);
    for i in 0..n {
        triangles.push([0, b(i + 1), b(i)]);
        triangles.push([1, t(i), t(i + 1)]);
        triangles.push([b(i), b(i + 1), t(i + 1)]);
        triangles.push([b(i), t(i + 1), t(i)]);
    }
    MeshData { vertices, triangles }
}

fn sphere_mesh(r: f64, stacks: usize, slices: usize) -> MeshData {
    let mut vertices = vec![Vec3::new(0.0, 0.0, r)];
    for s in 1..stacks {
        let theta = PI * s as f64 / stacks as f64;
        for k in 0..slices {
            let phi = 2.0 * PI * k as f64 / slices as f64;
            vertices.push(Vec3::new(r * theta.sin() * phi.cos(), r * theta.sin() * phi.sin(), r * theta.cos()));
        }
    }
    vertices.push(Vec3::new(0.0, 0.0, -r));
    let south = (vertices.len() - 1) as u32;
    let ring = |s: usize, k: usize| (1 + (s - 1) * slices + k % slices) as u32;
    let mut triangles = Vec::with_capacity(2 * slices * (stacks - 1));
    for k in 0..slices {
        triangles.push([0, ring(1, k), ring(1, k + 1)]);
    }
    for s in 1..stacks - 1 {
        for k in 0..slices {
            let (a, b, c, d) = (ring(s, k), ring(s, k + 1), ring(s + 1, k), ring(s + 1, k + 1));
            triangles.push([a, c, d]);
            triangles.push([a, d, b]);
        }
    }
    for k in 0..slices {
        triangles.push([south, ring(stacks - 1, k + 1), ring(stacks - 1, k)]);
    }
    MeshData { vertices, triangles }
}

/// Resolves a URDF mesh reference. `package://pkg/rest` is tried as
/// `<root>/pkg/rest` then `<root>/rest` for every search root; relative
/// paths are tried against `base_dir` first.
pub fn resolve_mesh_path(uri: &str, base_dir: Option<&Path>, search_roots: &[PathBuf]) -> Result<PathBuf> {
    let mut candidates = Vec::new();
    if let Some(rest) = uri.strip_prefix("package://") {
        for root in search_roots {
            candidates.push(root.join(rest));
            if let Some((_, tail)) = rest.split_once('/') {
                candidates.push(root.join(tail));
            }
        }
    } else {
        let p = Path::new(uri.strip_prefix("file://").unwrap_or(uri));
        if p.is_absolute() {
            candidates.push(p.to_path_buf());
        } else {
            if let Some(b) = base_dir {
                candidates.push(b.join(p));
            }
            candidates.extend(search_roots.iter().map(|r| r.join(p)));
            if base_dir.is_none() && search_roots.is_empty() {
                candidates.push(p.to_path_buf());
            }
        }
    }
    candidates
        .into_iter()
        .find(|c| c.is_file())
        .ok_or_else(|| RobotError::MeshNotFound(uri.to_string()))
}

/// Mesh for one visual, in the visual's own frame.
pub fn load_visual_mesh(v: &Visual, base_dir: Option<&Path>, search_roots: &[PathBuf]) -> Result<MeshData> {
    match &v.geometry {
        Geometry::Mesh { path, scale } => {
            let file = resolve_mesh_path(path, base_dir, search_roots)?;
            let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            if ext != "stl" {
                return Err(mesh_err(format!("unsupported mesh format '{}'", file.display())));
            }
            let bytes = std::fs::read(&file).map_err(|e| RobotError::Io {
                path: file.display().to_string(),
                message: e.to_string(),
            })?;
            let mut mesh = load_stl(&bytes)?;
            for p in mesh.vertices.iter_mut() {
                *p = Vec3::new(p.x * scale.x, p.y * scale.y, p.z * scale.z);
            }
            Ok(mesh)
        }
        g => tessellate(g),
    }
}

#[derive(Debug)]
pub struct StatePublisherState {
    pub model: RobotModel,
    pub topic: String,
    pub frame_prefix: String,
    pub positions: HashMap<String, f64>,
    pub handled: u64,
    pub skipped: u64,
    pub edges_broadcast: u64,
    pub last_fk: BTreeMap<String, Mat4>,
}

/// Turns joint states into one transform edge per joint.
#[derive(Debug, Clone)]
pub struct StatePublisher {
    inner: Rc<RefCell<StatePublisherState>>,
}

impl StatePublisher {
    pub fn state(&self) -> Ref<'_, StatePublisherState> {
        self.inner.borrow()
    }

    pub fn topic(&self) -> String {
        self.inner.borrow().topic.clone()
    }

    pub fn skipped(&self) -> u64 {
        self.inner.borrow().skipped
    }

    pub fn handled(&self) -> u64 {
        self.inner.borrow().handled
    }

    pub(crate) fn handle(&self, js: &JointState, tf: &TfBroadcaster) {
        let mut st = self.inner.borrow_mut();
        if let Some(bad) = js.names.iter().find(|n| st.model.joint(n).is_none()) {
            log::debug!("joint state names unknown joint '{bad}', skipped");
            st.skipped += 1;
            return;
        }
        let mut positions = st.positions.clone();
        for (n, q) in js.names.iter().zip(&js.positions) {
            positions.insert(n.clone(), *q);
        }
        let edges: Result<Vec<(String, String, Mat4)>> = st
            .model
            .joints
            .iter()
            .map(|j| Ok((j.parent.clone(), j.child.clone(), joint_transform(j, position_of(&positions, j))?)))
            .collect();
        let edges = match edges {
            Ok(e) => e,
            Err(e) => {
                log::debug!("joint state rejected: {e}");
                st.skipped += 1;
                return;
            }
        };
        let mut fk = BTreeMap::new();
        fk.insert(st.model.root.clone(), Mat4::IDENTITY);
        for (parent, child, m) in &edges {
            let p = fk.get(parent).copied().unwrap_or(Mat4::IDENTITY);
            fk.insert(child.clone(), compose(&p, m));
            let t = TransformStamped {
                parent_frame: format!("{}{parent}", st.frame_prefix),
                child_frame: format!("{}{child}", st.frame_prefix),
                stamp_ns: js.stamp_ns,
                translation: m.translation_part(),
                rotation: match crate::geometry::matrix_to_quat(m) {
                    Ok(q) => q,
                    Err(_) => continue,
                },
            };
            match tf.broadcast(&t) {
                Ok(()) => st.edges_broadcast += 1,
                Err(e) => log::debug!("edge {parent}->{child} rejected: {e}"),
            }
        }
        st.positions = positions;
        st.last_fk = fk;
        st.handled += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", content = "error", rename_all = "snake_case")]
pub enum LoadStatus {
    Pending,
    Loaded,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub param_name: String,
    pub fixed_frame: Option<String>,
    pub search_roots: Vec<PathBuf>,
    /// Directory that relative mesh paths are resolved against.
    pub base_dir: Option<PathBuf>,
    /// Prepended to every link frame name.
    pub frame_prefix: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            param_name: DEFAULT_DESCRIPTION_PARAM.to_string(),
            fixed_frame: None,
            search_roots: Vec::new(),
            base_dir: None,
            frame_prefix: String::new(),
        }
    }
}

#[derive(Debug)]
pub struct RobotState {
    pub source_node: Option<String>,
    pub options: LoadOptions,
    pub status: LoadStatus,
    pub model: Option<RobotModel>,
    pub link_nodes: BTreeMap<String, NodeId>,
    pub model_node_ids: Vec<NodeId>,
    pub lookup_node_ids: Vec<NodeId>,
    /// Node spin count at which loading finished.
    pub loaded_at_spin: Option<u64>,
    monitor: Option<ParameterMonitor>,
    pending_xml: Option<String>,
}

/// A robot shown in the scene, loaded from a robot-description parameter.
#[derive(Debug, Clone)]
pub struct RobotNode {
    inner: Rc<RefCell<RobotState>>,
}

impl RobotNode {
    pub fn state(&self) -> Ref<'_, RobotState> {
        self.inner.borrow()
    }

    pub fn status(&self) -> LoadStatus {
        self.inner.borrow().status.clone()
    }

    pub fn is_loaded(&self) -> bool {
        self.status() == LoadStatus::Loaded
    }

    pub fn model(&self) -> Option<RobotModel> {
        self.inner.borrow().model.clone()
    }

    pub fn model_node_ids(&self) -> Vec<NodeId> {
        self.inner.borrow().model_node_ids.clone()
    }

    pub fn lookup_node_ids(&self) -> Vec<NodeId> {
        self.inner.borrow().lookup_node_ids.clone()
    }
}

impl BridgeNode {
    /// Registers a state publisher listening on `topic`.
    pub fn create_state_publisher(&mut self, model: RobotModel, topic: &str, frame_prefix: &str) -> std::result::Result<StatePublisher, BusError> {
        crate::bus::validate_topic(topic)?;
        let sp = StatePublisher {
            inner: Rc::new(RefCell::new(StatePublisherState {
                model,
                topic: topic.to_string(),
                frame_prefix: frame_prefix.to_string(),
                positions: HashMap::new(),
                handled: 0,
                skipped: 0,
                edges_broadcast: 0,
                last_fk: BTreeMap::new(),
            })),
        };
        self.state_publishers.push(sp.clone());
        Ok(sp)
    }

    /// Loads a robot once `param_node` publishes the description parameter.
    pub fn load_robot(&mut self, param_node: &str, options: LoadOptions) -> std::result::Result<RobotNode, BusError> {
        let monitor = self.create_parameter_monitor(param_node)?;
        Ok(self.push_robot(RobotState {
            source_node: Some(param_node.to_string()),
            options,
            status: LoadStatus::Pending,
            model: None,
            link_nodes: BTreeMap::new(),
            model_node_ids: Vec::new(),
            lookup_node_ids: Vec::new(),
            loaded_at_spin: None,
            monitor: Some(monitor),
            pending_xml: None,
        }))
    }

    /// Loads a robot from URDF text on the next spin.
    pub fn load_robot_xml(&mut self, xml: &str, options: LoadOptions) -> RobotNode {
        self.push_robot(RobotState {
            source_node: None,
            options,
            status: LoadStatus::Pending,
            model: None,
            link_nodes: BTreeMap::new(),
            model_node_ids: Vec::new(),
            lookup_node_ids: Vec::new(),
            loaded_at_spin: None,
            monitor: None,
            pending_xml: Some(xml.to_string()),
        })
    }

    fn push_robot(&mut self, st: RobotState) -> RobotNode {
        let r = RobotNode {
            inner: Rc::new(RefCell::new(st)),
        };
        self.robots.push(r.clone());
        r
    }

    pub fn robots(&self) -> &[RobotNode] {
        &self.robots
    }
}

pub(crate) fn update_robots(node: &mut BridgeNode) {
    let pending: Vec<RobotNode> = node
        .robots
        .iter()
        .filter(|r| r.inner.borrow().status == LoadStatus::Pending)
        .cloned()
        .collect();
    for r in pending {
        let xml = {
            let mut st = r.inner.borrow_mut();
            let direct = st.pending_xml.take();
            match (&st.monitor, direct) {
                (_, Some(xml)) => xml,
                (Some(m), None) => match m.get(&st.options.param_name) {
                    Ok(v) => match v.as_str(&st.options.param_name) {
                        Ok(s) => s.to_string(),
                        Err(e) => {
                            st.status = LoadStatus::Failed(e.to_string());
                            continue;
                        }
                    },
                    Err(_) => continue,
                },
                (None, None) => continue,
            }
        };
        let result = build_robot(node, &r, &xml);
        let mut st = r.inner.borrow_mut();
        match result {
            Ok(()) => {
                st.status = LoadStatus::Loaded;
                st.loaded_at_spin = Some(node.spin_count());
            }
            Err(e) => {
                log::warn!("robot load failed: {e}");
                st.status = LoadStatus::Failed(e.to_string());
            }
        }
    }
}

fn build_robot(node: &mut BridgeNode, r: &RobotNode, xml: &str) -> std::result::Result<(), String> {
    let model = parse_urdf(xml).map_err(|e| e.to_string())?;
    for w in &model.warnings {
        log::info!("urdf: {w}");
    }
    let options = r.inner.borrow().options.clone();
    let mut meshes = Vec::new();
    for l in &model.links {
        for v in &l.visuals {
            let m = load_visual_mesh(v, options.base_dir.as_deref(), &options.search_roots)
                .map_err(|e| format!("link '{}': {e}", l.name))?;
            meshes.push(m);
        }
    }
    let prefix = &options.frame_prefix;
    let fixed = options
        .fixed_frame
        .clone()
        .unwrap_or_else(|| format!("{prefix}{}", model.root));
    let mut meshes = meshes.into_iter();
    let mut link_nodes = BTreeMap::new();
    let mut model_ids = Vec::new();
    let mut lookup_ids = Vec::new();
    for l in &model.links {
        let frame = format!("{prefix}{}", l.name);
        let lid = node.create_lookup_node(&fixed, &frame).map_err(|e| e.to_string())?;
        for (k, v) in l.visuals.iter().enumerate() {
            let mesh = meshes.next().unwrap_or_default();
            let oid = node.scene.unique_id("VisualOffset");
            node.scene
                .add_node(TransformNode::new(oid.clone(), format!("{frame}/visual{k}")).with_matrix(v.origin()))
                .map_err(|e| e.to_string())?;
            node.scene.set_parent(&oid, Some(&lid)).map_err(|e| e.to_string())?;
            let mid = node.scene.unique_id("ModelNode");
            let mut m = ModelNode::new(mid.clone(), format!("{frame}/visual{k}"), mesh);
            m.color = [v.color[0], v.color[1], v.color[2]];
            m.opacity = v.color[3];
            m.parent_transform_id = Some(oid);
            node.scene.add_node(m).map_err(|e| e.to_string())?;
            model_ids.push(mid);
        }
        link_nodes.insert(l.name.clone(), lid.clone());
        lookup_ids.push(lid);
    }
    let mut st = r.inner.borrow_mut();
    st.model = Some(model);
    st.link_nodes = link_nodes;
    st.model_node_ids = model_ids;
    st.lookup_node_ids = lookup_ids;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LINK: &str = r#"<robot name="r">
  <link name="base"><visual><geometry><box size="1 1 1"/></geometry></visual></link>
  <link name="tip"/>
  <joint name="j" type="revolute">
    <parent link="base"/><child link="tip"/>
    <axis xyz="0 0 2"/><limit lower="-1" upper="1"/>
  </joint>
</robot>"#;

    #[test]
    fn parses_minimal() {
        let m = parse_urdf(TWO_LINK).unwrap();
        assert_eq!(m.links.len(), 2);
        assert_eq!(m.joints.len(), 1);
        assert_eq!(m.root, "base");
        assert_eq!(m.joints[0].axis, Vec3::Z);
    }

    #[test]
    fn limit_error() {
        let m = parse_urdf(TWO_LINK).unwrap();
        assert!(matches!(joint_transform(&m.joints[0], 2.0), Err(RobotError::Limit { .. })));
    }

    #[test]
    fn primitive_counts() {
        let b = tessellate(&Geometry::Box { size: Vec3::new(1.0, 1.0, 1.0) }).unwrap();
        assert_eq!((b.vertices.len(), b.triangles.len()), (8, 12));
        assert!((b.signed_volume() - 1.0).abs() < 1e-12);
        let c = tessellate(&Geometry::Cylinder { radius: 1.0, length: 2.0 }).unwrap();
        assert_eq!((c.vertices.len(), c.triangles.len()), (66, 128));
        assert!(c.signed_volume() > 0.0);
        let s = tessellate(&Geometry::Sphere { radius: 1.0 }).unwrap();
        assert_eq!((s.vertices.len(), s.triangles.len()), (482, 960));
        assert!(s.signed_volume() > 0.0);
        s.validate().unwrap();
        assert!(tessellate(&Geometry::Sphere { radius: 0.0 }).is_err());
    }

    #[test]
    fn empty_ascii_stl() {
        let m = load_stl(b"solid empty\nendsolid empty\n").unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn ascii_stl_grammar_error_has_line() {
        let e = load_stl(b"solid x\nfacet normal 0 0 1\nouter lop\n").unwrap_err();
        assert!(matches!(e, StlError::Grammar { line: 3, .. }), "{e:?}");
    }
}
