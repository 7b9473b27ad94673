//! Wire values, their scene-side counterparts, and the binary frame format.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SRB2"
//! 4       1     version (1)
//! 5       1     type tag (1..=15)
//! 6       2     topic length N (u16)
//! 8       N     topic, UTF-8
//! 8+N     4     payload length P (u32)
//! 12+N    P     payload
//! ```
//!
//! Payload layouts per tag are listed in `docs/wire-format.md`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{matrix_to_quat, Mat4, Quaternion, Vec3, RIGID_TOLERANCE, UNIT_TOLERANCE};
use crate::tf::TransformStamped;

pub const MAGIC: [u8; 4] = *b"SRB2";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
/// Payloads above this size are treated as corrupt framing.
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("bad frame magic")]
    Framing,
    #[error("unsupported {what}: {value}")]
    Unsupported { what: &'static str, value: String },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Wire type tags. 1..=13 follow the row order of the supported message
/// table; 14 and 15 are the joint-state and transform extensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum TypeTag {
    String = 1,
    Bool = 2,
    Int = 3,
    Double = 4,
    IntArray = 5,
    DoubleArray = 6,
    IntTable = 7,
    DoubleTable = 8,
    PoseStamped = 9,
    WrenchStamped = 10,
    PoseArray = 11,
    UInt8Image = 12,
    PointCloud = 13,
    JointState = 14,
    TfTransform = 15,
}

impl TypeTag {
    pub const ALL: [TypeTag; 15] = [
        TypeTag::String,
        TypeTag::Bool,
        TypeTag::Int,
        TypeTag::Double,
        TypeTag::IntArray,
        TypeTag::DoubleArray,
        TypeTag::IntTable,
        TypeTag::DoubleTable,
        TypeTag::PoseStamped,
        TypeTag::WrenchStamped,
        TypeTag::PoseArray,
        TypeTag::UInt8Image,
        TypeTag::PointCloud,
        TypeTag::JointState,
        TypeTag::TfTransform,
    ];

    pub fn from_u8(v: u8) -> Option<TypeTag> {
        TypeTag::ALL.get((v as usize).wrapping_sub(1)).copied()
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            TypeTag::String => "String",
            TypeTag::Bool => "Bool",
            TypeTag::Int => "Int",
            TypeTag::Double => "Double",
            TypeTag::IntArray => "IntArray",
            TypeTag::DoubleArray => "DoubleArray",
            TypeTag::IntTable => "IntTable",
            TypeTag::DoubleTable => "DoubleTable",
            TypeTag::PoseStamped => "PoseStamped",
            TypeTag::WrenchStamped => "WrenchStamped",
            TypeTag::PoseArray => "PoseArray",
            TypeTag::UInt8Image => "UInt8Image",
            TypeTag::PointCloud => "PointCloud",
            TypeTag::JointState => "JointState",
            TypeTag::TfTransform => "TfTransform",
        }
    }
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TypeTag {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self> {
        TypeTag::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CodecError::Unsupported {
                what: "type name",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Header {
    /// Nanoseconds since the Unix epoch.
    pub stamp_ns: i64,
    pub frame_id: String,
}

impl Header {
    pub fn new(stamp_ns: i64, frame_id: impl Into<String>) -> Self {
        Header {
            stamp_ns,
            frame_id: frame_id.into(),
        }
    }
}

/// Row-major table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table<T> {
    pub rows: u32,
    pub cols: u32,
    pub data: Vec<T>,
}

impl<T: Copy> Table<T> {
    pub fn new(rows: u32, cols: u32, data: Vec<T>) -> Result<Self> {
        let t = Table { rows, cols, data };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows as u64 * self.cols as u64 != self.data.len() as u64 {
            return Err(CodecError::InvalidMessage(format!(
                "table {}x{} carries {} cells",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn get(&self, row: u32, col: u32) -> Option<T> {
        if row < self.rows && col < self.cols {
            self.data.get((row * self.cols + col) as usize).copied()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quaternion,
}

impl Pose {
    pub fn to_matrix(&self) -> Result<Mat4> {
        Mat4::from_pose(self.position, self.orientation)
            .map_err(|e| CodecError::InvalidMessage(e.to_string()))
    }

    pub fn from_matrix(m: &Mat4) -> Result<Pose> {
        if !m.is_rigid(RIGID_TOLERANCE) {
            return Err(CodecError::InvalidInput("matrix is not a rigid transform".into()));
        }
        let orientation = matrix_to_quat(m).map_err(|e| CodecError::InvalidInput(e.to_string()))?;
        Ok(Pose {
            position: m.translation_part(),
            orientation,
        })
    }
}

/// Channels for the supported image encodings.
pub fn encoding_channels(encoding: &str) -> Option<u32> {
    match encoding {
        "mono8" => Some(1),
        "rgb8" => Some(3),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub header: Header,
    pub height: u32,
    pub width: u32,
    pub encoding: String,
    /// Bytes per row.
    pub step: u32,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub stamp_ns: i64,
    pub names: Vec<String>,
    pub positions: Vec<f64>,
}

/// A message as it travels on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value")]
pub enum BridgeValue {
    String(String),
    Bool(bool),
    Int(i64),
    Double(f64),
    IntArray(Vec<i64>),
    DoubleArray(Vec<f64>),
    IntTable(Table<i64>),
    DoubleTable(Table<f64>),
    PoseStamped { header: Header, pose: Pose },
    /// Force in newtons, torque in newton-meters.
    WrenchStamped { header: Header, force: Vec3, torque: Vec3 },
    PoseArray { header: Header, poses: Vec<Pose> },
    UInt8Image(Image),
    PointCloud { header: Header, points: Vec<[f32; 3]> },
    JointState(JointState),
    TfTransform(TransformStamped),
}

impl BridgeValue {
    pub fn tag(&self) -> TypeTag {
        match self {
            BridgeValue::String(_) => TypeTag::String,
            BridgeValue::Bool(_) => TypeTag::Bool,
            BridgeValue::Int(_) => TypeTag::Int,
            BridgeValue::Double(_) => TypeTag::Double,
            BridgeValue::IntArray(_) => TypeTag::IntArray,
            BridgeValue::DoubleArray(_) => TypeTag::DoubleArray,
            BridgeValue::IntTable(_) => TypeTag::IntTable,
            BridgeValue::DoubleTable(_) => TypeTag::DoubleTable,
            BridgeValue::PoseStamped { .. } => TypeTag::PoseStamped,
            BridgeValue::WrenchStamped { .. } => TypeTag::WrenchStamped,
            BridgeValue::PoseArray { .. } => TypeTag::PoseArray,
            BridgeValue::UInt8Image(_) => TypeTag::UInt8Image,
            BridgeValue::PointCloud { .. } => TypeTag::PointCloud,
            BridgeValue::JointState(_) => TypeTag::JointState,
            BridgeValue::TfTransform(_) => TypeTag::TfTransform,
        }
    }

    pub fn stamp_ns(&self) -> Option<i64> {
        match self {
            BridgeValue::PoseStamped { header, .. }
            | BridgeValue::WrenchStamped { header, .. }
            | BridgeValue::PoseArray { header, .. }
            | BridgeValue::PointCloud { header, .. } => Some(header.stamp_ns),
            BridgeValue::UInt8Image(img) => Some(img.header.stamp_ns),
            BridgeValue::JointState(js) => Some(js.stamp_ns),
            BridgeValue::TfTransform(t) => Some(t.stamp_ns),
            _ => None,
        }
    }

    /// Checks the structural invariants of the value.
    pub fn validate(&self) -> Result<()> {
        let unit = |q: &Quaternion| {
            if q.is_finite() && q.is_unit(UNIT_TOLERANCE) {
                Ok(())
            } else {
                Err(CodecError::InvalidMessage(format!(
                    "orientation norm {} is not unit",
                    q.norm()
                )))
            }
        };
        match self {
            BridgeValue::IntTable(t) => t.validate(),
            BridgeValue::DoubleTable(t) => t.validate(),
            BridgeValue::PoseStamped { pose, .. } => unit(&pose.orientation),
            BridgeValue::PoseArray { poses, .. } => poses.iter().try_for_each(|p| unit(&p.orientation)),
            BridgeValue::UInt8Image(img) => {
                let channels = encoding_channels(&img.encoding).ok_or_else(|| CodecError::Unsupported {
                    what: "image encoding",
                    value: img.encoding.clone(),
                })?;
                if (img.step as u64) < img.width as u64 * channels as u64 {
                    return Err(CodecError::InvalidMessage(format!(
                        "step {} below width {} x {} channels",
                        img.step, img.width, channels
                    )));
                }
                if img.data.len() as u64 != img.height as u64 * img.step as u64 {
                    return Err(CodecError::InvalidMessage(format!(
                        "image data holds {} bytes, expected {} x {}",
                        img.data.len(),
                        img.height,
                        img.step
                    )));
                }
                Ok(())
            }
            BridgeValue::JointState(js) => {
                if js.names.len() != js.positions.len() {
                    return Err(CodecError::InvalidMessage(format!(
                        "{} joint names but {} positions",
                        js.names.len(),
                        js.positions.len()
                    )));
                }
                Ok(())
            }
            BridgeValue::TfTransform(t) => t
                .validate()
                .map_err(|e| CodecError::InvalidMessage(e.to_string())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ByteImage {
    pub height: u32,
    pub width: u32,
    pub encoding: String,
    pub step: u32,
    pub data: Vec<u8>,
}

/// Scene-side representation of a message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SceneValue {
    String(String),
    Bool(bool),
    Int(i64),
    Double(f64),
    IntArray(Vec<i64>),
    /// Also carries wrenches as `(fx, fy, fz, tx, ty, tz)`.
    DoubleArray(Vec<f64>),
    IntTable(Table<i64>),
    DoubleTable(Table<f64>),
    Matrix(Mat4),
    TransformCollection(Vec<Mat4>),
    ByteImage(ByteImage),
    PointSet(Vec<[f32; 3]>),
    JointPositions { names: Vec<String>, positions: Vec<f64> },
    FrameTransform { parent_frame: String, child_frame: String, matrix: Mat4 },
}

/// Converts a wire value into its scene representation.
pub fn bridge_to_scene(v: &BridgeValue) -> Result<SceneValue> {
    v.validate()?;
    Ok(match v {
        BridgeValue::String(s) => SceneValue::String(s.clone()),
        BridgeValue::Bool(b) => SceneValue::Bool(*b),
        BridgeValue::Int(i) => SceneValue::Int(*i),
        BridgeValue::Double(d) => SceneValue::Double(*d),
        BridgeValue::IntArray(a) => SceneValue::IntArray(a.clone()),
        BridgeValue::DoubleArray(a) => SceneValue::DoubleArray(a.clone()),
        BridgeValue::IntTable(t) => SceneValue::IntTable(t.clone()),
        BridgeValue::DoubleTable(t) => SceneValue::DoubleTable(t.clone()),
        BridgeValue::PoseStamped { pose, .. } => SceneValue::Matrix(pose.to_matrix()?),
        BridgeValue::WrenchStamped { force, torque, .. } => SceneValue::DoubleArray(vec![
            force.x, force.y, force.z, torque.x, torque.y, torque.z,
        ]),
        BridgeValue::PoseArray { poses, .. } => SceneValue::TransformCollection(
            poses.iter().map(Pose::to_matrix).collect::<Result<_>>()?,
        ),
        BridgeValue::UInt8Image(img) => SceneValue::ByteImage(ByteImage {
            height: img.height,
            width: img.width,
            encoding: img.encoding.clone(),
            step: img.step,
            data: img.data.clone(),
        }),
        BridgeValue::PointCloud { points, .. } => SceneValue::PointSet(points.clone()),
        BridgeValue::JointState(js) => SceneValue::JointPositions {
            names: js.names.clone(),
            positions: js.positions.clone(),
        },
        BridgeValue::TfTransform(t) => SceneValue::FrameTransform {
            parent_frame: t.parent_frame.clone(),
            child_frame: t.child_frame.clone(),
            matrix: t.matrix(),
        },
    })
}

/// Converts a scene value into the wire value of type `target`. Stamped
/// targets take their stamp and frame from `header`.
pub fn scene_to_bridge(v: &SceneValue, target: TypeTag, header: &Header) -> Result<BridgeValue> {
    let mismatch = || {
        CodecError::InvalidInput(format!(
            "scene value {} cannot be published as {target}",
            scene_kind(v)
        ))
    };
    let out = match (v, target) {
        (SceneValue::String(s), TypeTag::String) => BridgeValue::String(s.clone()),
        (SceneValue::Bool(b), TypeTag::Bool) => BridgeValue::Bool(*b),
        (SceneValue::Int(i), TypeTag::Int) => BridgeValue::Int(*i),
        (SceneValue::Double(d), TypeTag::Double) => BridgeValue::Double(*d),
        (SceneValue::IntArray(a), TypeTag::IntArray) => BridgeValue::IntArray(a.clone()),
        (SceneValue::DoubleArray(a), TypeTag::DoubleArray) => BridgeValue::DoubleArray(a.clone()),
        (SceneValue::DoubleArray(a), TypeTag::WrenchStamped) => {
            if a.len() != 6 {
                return Err(CodecError::InvalidInput(format!(
                    "a wrench needs 6 components, got {}",
                    a.len()
                )));
            }
            BridgeValue::WrenchStamped {
                header: header.clone(),
                force: Vec3::new(a[0], a[1], a[2]),
                torque: Vec3::new(a[3], a[4], a[5]),
            }
        }
        (SceneValue::IntTable(t), TypeTag::IntTable) => BridgeValue::IntTable(t.clone()),
        (SceneValue::DoubleTable(t), TypeTag::DoubleTable) => BridgeValue::DoubleTable(t.clone()),
        (SceneValue::Matrix(m), TypeTag::PoseStamped) => BridgeValue::PoseStamped {
            header: header.clone(),
            pose: Pose::from_matrix(m)?,
        },
        (SceneValue::TransformCollection(ms), TypeTag::PoseArray) => BridgeValue::PoseArray {
            header: header.clone(),
            poses: ms.iter().map(Pose::from_matrix).collect::<Result<_>>()?,
        },
        (SceneValue::ByteImage(img), TypeTag::UInt8Image) => BridgeValue::UInt8Image(Image {
            header: header.clone(),
            height: img.height,
            width: img.width,
            encoding: img.encoding.clone(),
            step: img.step,
            data: img.data.clone(),
        }),
        (SceneValue::PointSet(p), TypeTag::PointCloud) => BridgeValue::PointCloud {
            header: header.clone(),
            points: p.clone(),
        },
        (SceneValue::JointPositions { names, positions }, TypeTag::JointState) => {
            BridgeValue::JointState(JointState {
                stamp_ns: header.stamp_ns,
                names: names.clone(),
                positions: positions.clone(),
            })
        }
        (
            SceneValue::FrameTransform {
                parent_frame,
                child_frame,
                matrix,
            },
            TypeTag::TfTransform,
        ) => {
            let pose = Pose::from_matrix(matrix)?;
            BridgeValue::TfTransform(TransformStamped {
                parent_frame: parent_frame.clone(),
                child_frame: child_frame.clone(),
                stamp_ns: header.stamp_ns,
                translation: pose.position,
                rotation: pose.orientation,
            })
        }
        _ => return Err(mismatch()),
    };
    out.validate().map_err(|e| match e {
        CodecError::InvalidMessage(m) => CodecError::InvalidInput(m),
        other => other,
    })?;
    Ok(out)
}

fn scene_kind(v: &SceneValue) -> &'static str {
    match v {
        SceneValue::String(_) => "string",
        SceneValue::Bool(_) => "boolean",
        SceneValue::Int(_) => "integer",
        SceneValue::Double(_) => "double",
        SceneValue::IntArray(_) => "integer array",
        SceneValue::DoubleArray(_) => "double array",
        SceneValue::IntTable(_) => "integer table",
        SceneValue::DoubleTable(_) => "double table",
        SceneValue::Matrix(_) => "matrix",
        SceneValue::TransformCollection(_) => "transform collection",
        SceneValue::ByteImage(_) => "byte image",
        SceneValue::PointSet(_) => "point set",
        SceneValue::JointPositions { .. } => "joint positions",
        SceneValue::FrameTransform { .. } => "frame transform",
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n)
            .map_err(|_| CodecError::InvalidInput(format!("sequence of {n} elements is too long")))?;
        self.u32(n);
        Ok(())
    }
    fn string(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn vec3(&mut self, v: &Vec3) {
        self.f64(v.x);
        self.f64(v.y);
        self.f64(v.z);
    }
    fn quat(&mut self, q: &Quaternion) {
        self.f64(q.x);
        self.f64(q.y);
        self.f64(q.z);
        self.f64(q.w);
    }
    fn header(&mut self, h: &Header) -> Result<()> {
        self.i64(h.stamp_ns);
        self.string(&h.frame_id)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(
            CodecError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            },
        )?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    /// Element count, checked against the bytes left so a corrupt count
    /// cannot trigger a huge allocation.
    fn count(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        let left = self.buf.len() - self.pos;
        if n.saturating_mul(elem_size.max(1)) > left {
            return Err(CodecError::Truncated {
                needed: self.pos + n.saturating_mul(elem_size.max(1)),
                available: self.buf.len(),
            });
        }
        Ok(n)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.count(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CodecError::InvalidMessage("string is not valid UTF-8".into()))
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn quat(&mut self) -> Result<Quaternion> {
        Ok(Quaternion {
            x: self.f64()?,
            y: self.f64()?,
            z: self.f64()?,
            w: self.f64()?,
        })
    }
    fn header(&mut self) -> Result<Header> {
        Ok(Header {
            stamp_ns: self.i64()?,
            frame_id: self.string()?,
        })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CodecError::InvalidMessage(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Serializes the payload of a value (no frame header).
pub fn encode_payload(v: &BridgeValue) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    match v {
        BridgeValue::String(s) => w.string(s)?,
        BridgeValue::Bool(b) => w.u8(*b as u8),
        BridgeValue::Int(i) => w.i64(*i),
        BridgeValue::Double(d) => w.f64(*d),
        BridgeValue::IntArray(a) => {
            w.len(a.len())?;
            a.iter().for_each(|x| w.i64(*x));
        }
        BridgeValue::DoubleArray(a) => {
            w.len(a.len())?;
            a.iter().for_each(|x| w.f64(*x));
        }
        BridgeValue::IntTable(t) => {
            t.validate()?;
            w.u32(t.rows);
            w.u32(t.cols);
            t.data.iter().for_each(|x| w.i64(*x));
        }
        BridgeValue::DoubleTable(t) => {
            t.validate()?;
            w.u32(t.rows);
            w.u32(t.cols);
            t.data.iter().for_each(|x| w.f64(*x));
        }
        BridgeValue::PoseStamped { header, pose } => {
            w.header(header)?;
            w.vec3(&pose.position);
            w.quat(&pose.orientation);
        }
        BridgeValue::WrenchStamped {
            header,
            force,
            torque,
        } => {
            w.header(header)?;
            w.vec3(force);
            w.vec3(torque);
        }
        BridgeValue::PoseArray { header, poses } => {
            w.header(header)?;
            w.len(poses.len())?;
            for p in poses {
                w.vec3(&p.position);
                w.quat(&p.orientation);
            }
        }
        BridgeValue::UInt8Image(img) => {
            w.header(&img.header)?;
            w.u32(img.height);
            w.u32(img.width);
            w.string(&img.encoding)?;
            w.u32(img.step);
            w.len(img.data.len())?;
            w.0.extend_from_slice(&img.data);
        }
        BridgeValue::PointCloud { header, points } => {
            w.header(header)?;
            w.len(points.len())?;
            for p in points {
                p.iter().for_each(|c| w.f32(*c));
            }
        }
        BridgeValue::JointState(js) => {
            w.i64(js.stamp_ns);
            w.len(js.names.len())?;
            for n in &js.names {
                w.string(n)?;
            }
            w.len(js.positions.len())?;
            js.positions.iter().for_each(|x| w.f64(*x));
        }
        BridgeValue::TfTransform(t) => {
            w.string(&t.parent_frame)?;
            w.string(&t.child_frame)?;
            w.i64(t.stamp_ns);
            w.vec3(&t.translation);
            w.quat(&t.rotation);
        }
    }
    Ok(w.0)
}

/// Parses a payload of the given tag. Structural decoding only; semantic
/// invariants are checked by [`BridgeValue::validate`].
pub fn decode_payload(tag: TypeTag, payload: &[u8]) -> Result<BridgeValue> {
    let mut r = Reader { buf: payload, pos: 0 };
    let v = match tag {
        TypeTag::String => BridgeValue::String(r.string()?),
        TypeTag::Bool => match r.u8()? {
            0 => BridgeValue::Bool(false),
            1 => BridgeValue::Bool(true),
            b => return Err(CodecError::InvalidMessage(format!("bool byte {b}"))),
        },
        TypeTag::Int => BridgeValue::Int(r.i64()?),
        TypeTag::Double => BridgeValue::Double(r.f64()?),
        TypeTag::IntArray => {
            let n = r.count(8)?;
            BridgeValue::IntArray((0..n).map(|_| r.i64()).collect::<Result<_>>()?)
        }
        TypeTag::DoubleArray => {
            let n = r.count(8)?;
            BridgeValue::DoubleArray((0..n).map(|_| r.f64()).collect::<Result<_>>()?)
        }
        TypeTag::IntTable | TypeTag::DoubleTable => {
            let rows = r.u32()?;
            let cols = r.u32()?;
            let cells = rows as u64 * cols as u64;
            if cells.saturating_mul(8) > (payload.len() - r.pos) as u64 {
                return Err(CodecError::Truncated {
                    needed: r.pos + (cells.saturating_mul(8)) as usize,
                    available: payload.len(),
                });
            }
            if tag == TypeTag::IntTable {
                let data = (0..cells).map(|_| r.i64()).collect::<Result<_>>()?;
                BridgeValue::IntTable(Table { rows, cols, data })
            } else {
                let data = (0..cells).map(|_| r.f64()).collect::<Result<_>>()?;
                BridgeValue::DoubleTable(Table { rows, cols, data })
            }
        }
        TypeTag::PoseStamped => BridgeValue::PoseStamped {
            header: r.header()?,
            pose: Pose {
                position: r.vec3()?,
                orientation: r.quat()?,
            },
        },
        TypeTag::WrenchStamped => BridgeValue::WrenchStamped {
            header: r.header()?,
            force: r.vec3()?,
            torque: r.vec3()?,
        },
        TypeTag::PoseArray => {
            let header = r.header()?;
            let n = r.count(56)?;
            let poses = (0..n)
                .map(|_| {
                    Ok(Pose {
                        position: r.vec3()?,
                        orientation: r.quat()?,
                    })
                })
                .collect::<Result<_>>()?;
            BridgeValue::PoseArray { header, poses }
        }
        TypeTag::UInt8Image => {
            let header = r.header()?;
            let height = r.u32()?;
            let width = r.u32()?;
            let encoding = r.string()?;
            let step = r.u32()?;
            let n = r.count(1)?;
            let data = r.take(n)?.to_vec();
            BridgeValue::UInt8Image(Image {
                header,
                height,
                width,
                encoding,
                step,
                data,
            })
        }
        TypeTag::PointCloud => {
            let header = r.header()?;
            let n = r.count(12)?;
            let points = (0..n)
                .map(|_| Ok([r.f32()?, r.f32()?, r.f32()?]))
                .collect::<Result<_>>()?;
            BridgeValue::PointCloud { header, points }
        }
        TypeTag::JointState => {
            let stamp_ns = r.i64()?;
            let n = r.count(4)?;
            let names = (0..n).map(|_| r.string()).collect::<Result<_>>()?;
            let m = r.count(8)?;
            let positions = (0..m).map(|_| r.f64()).collect::<Result<_>>()?;
            BridgeValue::JointState(JointState {
                stamp_ns,
                names,
                positions,
            })
        }
        TypeTag::TfTransform => BridgeValue::TfTransform(TransformStamped {
            parent_frame: r.string()?,
            child_frame: r.string()?,
            stamp_ns: r.i64()?,
            translation: r.vec3()?,
            rotation: r.quat()?,
        }),
    };
    r.finish()?;
    Ok(v)
}

/// Serializes a complete frame.
pub fn encode(topic: &str, v: &BridgeValue) -> Result<Vec<u8>> {
    if topic.is_empty() {
        return Err(CodecError::InvalidInput("empty topic".into()));
    }
    let topic_len = u16::try_from(topic.len())
        .map_err(|_| CodecError::InvalidInput(format!("topic of {} bytes is too long", topic.len())))?;
    let payload = encode_payload(v)?;
    let payload_len = u32::try_from(payload.len())
        .ok()
        .filter(|&n| n as usize <= MAX_PAYLOAD)
        .ok_or_else(|| CodecError::InvalidInput("payload too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + topic.len() + 4 + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(v.tag().as_u8());
    out.extend_from_slice(&topic_len.to_le_bytes());
    out.extend_from_slice(topic.as_bytes());
    out.extend_from_slice(&payload_len.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Fixed part of a frame: everything before the payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u8,
    pub tag_byte: u8,
    pub topic: String,
    pub payload_len: usize,
    /// Total frame size including the payload.
    pub frame_len: usize,
}

impl FrameHeader {
    pub fn tag(&self) -> Option<TypeTag> {
        TypeTag::from_u8(self.tag_byte)
    }
}

/// Reads a frame header from the start of `buf` without checking version
/// or tag. Errors on bad magic or when `buf` is too short.
pub fn peek_header(buf: &[u8]) -> Result<FrameHeader> {
    let m = buf.len().min(4);
    if buf[..m] != MAGIC[..m] {
        return Err(CodecError::Framing);
    }
    let need = |n: usize| {
        if buf.len() < n {
            Err(CodecError::Truncated {
                needed: n,
                available: buf.len(),
            })
        } else {
            Ok(())
        }
    };
    need(HEADER_LEN)?;
    let version = buf[4];
    let tag_byte = buf[5];
    let topic_len = u16::from_le_bytes([buf[6], buf[7]]) as usize;
    need(HEADER_LEN + topic_len + 4)?;
    let topic = std::str::from_utf8(&buf[HEADER_LEN..HEADER_LEN + topic_len])
        .map_err(|_| CodecError::InvalidMessage("topic is not valid UTF-8".into()))?
        .to_string();
    let p = HEADER_LEN + topic_len;
    let payload_len = u32::from_le_bytes([buf[p], buf[p + 1], buf[p + 2], buf[p + 3]]) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(CodecError::Framing);
    }
    Ok(FrameHeader {
        version,
        tag_byte,
        topic,
        payload_len,
        frame_len: p + 4 + payload_len,
    })
}

/// Decodes one complete frame occupying all of `buf`.
pub fn decode(buf: &[u8]) -> Result<(String, BridgeValue)> {
    let h = peek_header(buf)?;
    if buf.len() < h.frame_len {
        return Err(CodecError::Truncated {
            needed: h.frame_len,
            available: buf.len(),
        });
    }
    if buf.len() > h.frame_len {
        return Err(CodecError::InvalidMessage(format!(
            "{} bytes after the end of the frame",
            buf.len() - h.frame_len
        )));
    }
    if h.version != VERSION {
        return Err(CodecError::Unsupported {
            what: "version",
            value: h.version.to_string(),
        });
    }
    let tag = h.tag().ok_or_else(|| CodecError::Unsupported {
        what: "type tag",
        value: h.tag_byte.to_string(),
    })?;
    let value = decode_payload(tag, &buf[h.frame_len - h.payload_len..])?;
    Ok((h.topic, value))
}

/// Splits a byte stream into frames, skipping to the next magic after
/// garbage.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
    start: usize,
}

impl FrameReader {
    pub fn new() -> Self {
        FrameReader::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Next complete frame, `Some(Err(Framing))` once per run of skipped
    /// garbage, or `None` when more bytes are needed.
    pub fn next_frame(&mut self) -> Option<Result<Vec<u8>>> {
        let avail = &self.buf[self.start..];
        if avail.is_empty() {
            return None;
        }
        match peek_header(avail) {
            Ok(h) => {
                if avail.len() < h.frame_len {
                    return None;
                }
                let frame = avail[..h.frame_len].to_vec();
                self.consume(h.frame_len);
                Some(Ok(frame))
            }
            Err(CodecError::Truncated { .. }) => None,
            Err(_) => {
                let skip = match find_magic(&avail[1..]) {
                    Some(i) => i + 1,
                    // keep a partial magic at the end buffered
                    None => avail.len() - partial_magic_suffix(avail),
                };
                self.consume(skip.max(1));
                Some(Err(CodecError::Framing))
            }
        }
    }

    fn consume(&mut self, n: usize) {
        self.start += n;
        if self.start > 64 * 1024 && self.start * 2 > self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
    }
}

fn find_magic(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == MAGIC)
}

/// Length of the longest proper prefix of the magic that ends `buf`.
fn partial_magic_suffix(buf: &[u8]) -> usize {
    (1..4)
        .rev()
        .find(|&k| buf.len() > k && buf[buf.len() - k..] == MAGIC[..k])
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_world_frame_bytes() {
        let bytes = encode("/pub", &BridgeValue::String("Hello world.".into())).unwrap();
        let mut expect = b"SRB2\x01\x01\x04\x00/pub\x10\x00\x00\x00\x0c\x00\x00\x00".to_vec();
        expect.extend_from_slice(b"Hello world.");
        assert_eq!(bytes, expect);
        let (topic, v) = decode(&bytes).unwrap();
        assert_eq!(topic, "/pub");
        assert_eq!(v, BridgeValue::String("Hello world.".into()));
    }

    #[test]
    fn empty_point_cloud_round_trips() {
        let v = BridgeValue::PointCloud {
            header: Header::new(5, "map"),
            points: vec![],
        };
        let b = encode("/cloud", &v).unwrap();
        assert_eq!(decode(&b).unwrap().1, v);
    }

    #[test]
    fn decode_errors() {
        let good = encode("/t", &BridgeValue::Int(7)).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(CodecError::Framing));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(CodecError::Unsupported { what: "version", .. })));
        let mut t = good.clone();
        t[5] = 99;
        assert!(matches!(decode(&t), Err(CodecError::Unsupported { what: "type tag", .. })));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(CodecError::Truncated { .. })));
        assert!(matches!(encode("", &BridgeValue::Int(1)), Err(CodecError::InvalidInput(_))));
    }

    #[test]
    fn topic_length_limit() {
        let long = "/".repeat(65_535);
        assert!(encode(&long, &BridgeValue::Bool(true)).is_ok());
        let too_long = "/".repeat(65_536);
        assert!(encode(&too_long, &BridgeValue::Bool(true)).is_err());
    }

    #[test]
    fn null_wrench_from_zero_array() {
        let v = scene_to_bridge(&SceneValue::DoubleArray(vec![0.0; 6]), TypeTag::WrenchStamped, &Header::default())
            .unwrap();
        match v {
            BridgeValue::WrenchStamped { force, torque, .. } => {
                assert_eq!(force, Vec3::ZERO);
                assert_eq!(torque, Vec3::ZERO);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = scene_to_bridge(&SceneValue::DoubleArray(vec![0.0; 5]), TypeTag::WrenchStamped, &Header::default());
        assert!(matches!(err, Err(CodecError::InvalidInput(_))));
    }

    #[test]
    fn pose_round_trip_translation() {
        let v = BridgeValue::PoseStamped {
            header: Header::new(1, "base"),
            pose: Pose {
                position: Vec3::new(1.0, 2.0, 3.0),
                orientation: Quaternion::IDENTITY,
            },
        };
        assert_eq!(bridge_to_scene(&v).unwrap(), SceneValue::Matrix(Mat4::translation(1.0, 2.0, 3.0)));
        let back = scene_to_bridge(&bridge_to_scene(&v).unwrap(), TypeTag::PoseStamped, &Header::new(1, "base")).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn transform_collection_preserves_order() {
        let ms: Vec<Mat4> = (0..4).map(|i| Mat4::translation(i as f64, 0.0, 0.0)).collect();
        let v = scene_to_bridge(&SceneValue::TransformCollection(ms), TypeTag::PoseArray, &Header::default()).unwrap();
        let BridgeValue::PoseArray { poses, .. } = v else { panic!() };
        assert_eq!(poses.len(), 4);
        for (i, p) in poses.iter().enumerate() {
            assert_eq!(p.position.x, i as f64);
        }
    }

    #[test]
    fn shape_mismatch_and_non_rigid() {
        assert!(scene_to_bridge(&SceneValue::Int(1), TypeTag::String, &Header::default()).is_err());
        let mut m = Mat4::IDENTITY;
        m.set(0, 0, 2.0);
        assert!(matches!(
            scene_to_bridge(&SceneValue::Matrix(m), TypeTag::PoseStamped, &Header::default()),
            Err(CodecError::InvalidInput(_))
        ));
        assert_eq!(
            scene_to_bridge(&SceneValue::DoubleArray(vec![]), TypeTag::DoubleArray, &Header::default()).unwrap(),
            BridgeValue::DoubleArray(vec![])
        );
    }

    #[test]
    fn image_invariants() {
        let img = |enc: &str, step: u32, len: usize| {
            BridgeValue::UInt8Image(Image {
                header: Header::default(),
                height: 2,
                width: 3,
                encoding: enc.into(),
                step,
                data: vec![0; len],
            })
        };
        assert!(img("mono8", 3, 6).validate().is_ok());
        assert!(img("rgb8", 9, 18).validate().is_ok());
        assert!(img("rgb8", 8, 16).validate().is_err());
        assert!(img("mono8", 4, 6).validate().is_err());
        assert!(matches!(img("bgr16", 6, 12).validate(), Err(CodecError::Unsupported { .. })));
    }

    #[test]
    fn table_row_major() {
        let t = Table::new(2, 3, vec![0, 1, 2, 10, 11, 12]).unwrap();
        assert_eq!(t.get(1, 2), Some(12));
        assert!(Table::new(2, 2, vec![1i64]).is_err());
    }

    #[test]
    fn reader_resynchronizes() {
        let a = encode("/a", &BridgeValue::Int(1)).unwrap();
        let b = encode("/b", &BridgeValue::Int(2)).unwrap();
        let mut stream = a.clone();
        stream.extend_from_slice(b"garbageSR");
        stream.extend_from_slice(&b);
        let mut r = FrameReader::new();
        // feed one byte at a time to exercise partial reads
        let mut frames = vec![];
        let mut errors = 0;
        for byte in &stream {
            r.push(std::slice::from_ref(byte));
            while let Some(f) = r.next_frame() {
                match f {
                    Ok(f) => frames.push(f),
                    Err(_) => errors += 1,
                }
            }
        }
        assert_eq!(frames, vec![a, b]);
        assert!(errors >= 1);
        assert_eq!(r.buffered(), 0);
    }

    #[test]
    fn tag_names_parse() {
        for t in TypeTag::ALL {
            assert_eq!(t.name().parse::<TypeTag>().unwrap(), t);
            assert_eq!(TypeTag::from_u8(t.as_u8()), Some(t));
        }
        assert_eq!(TypeTag::from_u8(0), None);
        assert_eq!(TypeTag::from_u8(16), None);
    }
}
