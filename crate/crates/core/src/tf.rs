//! Timestamped transform tree: storage, interpolated lookup and the lookup
//! nodes that mirror a frame pair into the scene every spin.
//!
//! Each edge is keyed by its child frame (a child has one parent) and holds a
//! time-sorted list of samples `T_parent_child`, i.e. the pose of the child
//! frame expressed in the parent frame. `lookup(target, source)` returns the
//! matrix mapping points in `source` coordinates into `target` coordinates.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, invert, slerp, Mat4, Quaternion, Vec3};
use crate::scene::NodeId;

/// Samples are kept for this long behind the newest one on their edge.
pub const DEFAULT_CACHE_DURATION_NS: i64 = 10_000_000_000;
/// Requests at most this far outside an edge's sample range are clamped.
pub const EXTRAPOLATION_TOLERANCE_NS: i64 = 1_000_000;
/// A lookup node reports a change only above this entry-wise difference.
pub const CHANGE_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TfError {
    #[error("invalid transform: {0}")]
    InvalidInput(String),
    #[error("frame '{0}' is unknown")]
    UnknownFrame(String),
    #[error("frames '{target_frame}' and '{source_frame}' are not connected")]
    Connectivity { target_frame: String, source_frame: String },
    #[error("edge '{parent}' -> '{child}' has no data at {time_ns} ns (available {oldest_ns}..{newest_ns})")]
    Extrapolation {
        parent: String,
        child: String,
        time_ns: i64,
        oldest_ns: i64,
        newest_ns: i64,
    },
    #[error("edge '{parent}' -> '{child}' would close a cycle")]
    Cycle { parent: String, child: String },
}

pub type Result<T> = std::result::Result<T, TfError>;

/// One rigid transform between two named frames at a point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformStamped {
    pub parent_frame: String,
    pub child_frame: String,
    pub stamp_ns: i64,
    pub translation: Vec3,
    pub rotation: Quaternion,
}

impl TransformStamped {
    pub fn new(
        parent: impl Into<String>,
        child: impl Into<String>,
        stamp_ns: i64,
        matrix: &Mat4,
    ) -> Result<Self> {
        let rotation = crate::geometry::matrix_to_quat(matrix)
            .map_err(|e| TfError::InvalidInput(e.to_string()))?;
        let t = TransformStamped {
            parent_frame: parent.into(),
            child_frame: child.into(),
            stamp_ns,
            translation: matrix.translation_part(),
            rotation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parent_frame == self.child_frame {
            return Err(TfError::InvalidInput(format!(
                "parent and child are both '{}'",
                self.parent_frame
            )));
        }
        if self.parent_frame.is_empty() || self.child_frame.is_empty() {
            return Err(TfError::InvalidInput("empty frame name".into()));
        }
        if !self.translation.is_finite() || !self.rotation.is_unit(crate::geometry::UNIT_TOLERANCE) {
            return Err(TfError::InvalidInput(
                "translation must be finite and rotation unit".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat4 {
        // validate() guarantees a unit rotation
        Mat4::from_pose(self.translation, self.rotation).unwrap_or(Mat4::IDENTITY)
    }
}

/// Point in time for a lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupTime {
    /// Newest sample of every edge on the path.
    Latest,
    At(i64),
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    stamp_ns: i64,
    translation: Vec3,
    rotation: Quaternion,
}

#[derive(Debug, Clone)]
struct Edge {
    parent: String,
    samples: VecDeque<Sample>,
}

impl Edge {
    fn insert(&mut self, s: Sample, cache_ns: i64) {
        let pos = self.samples.partition_point(|x| x.stamp_ns < s.stamp_ns);
        if self.samples.get(pos).is_some_and(|x| x.stamp_ns == s.stamp_ns) {
            self.samples[pos] = s;
        } else {
            self.samples.insert(pos, s);
        }
        let newest = self.samples.back().map_or(s.stamp_ns, |x| x.stamp_ns);
        while self
            .samples
            .front()
            .is_some_and(|x| x.stamp_ns < newest.saturating_sub(cache_ns))
        {
            self.samples.pop_front();
        }
    }

    fn at(&self, child: &str, time: LookupTime) -> Result<Mat4> {
        let (first, last) = match (self.samples.front(), self.samples.back()) {
            (Some(f), Some(l)) => (f, l),
            _ => {
                return Err(TfError::Connectivity {
                    target_frame: self.parent.clone(),
                    source_frame: child.to_string(),
                })
            }
        };
        let t = match time {
            LookupTime::Latest => return sample_matrix(last),
            LookupTime::At(t) => t,
        };
        if t < first.stamp_ns.saturating_sub(EXTRAPOLATION_TOLERANCE_NS)
            || t > last.stamp_ns.saturating_add(EXTRAPOLATION_TOLERANCE_NS)
        {
            return Err(TfError::Extrapolation {
                parent: self.parent.clone(),
                child: child.to_string(),
                time_ns: t,
                oldest_ns: first.stamp_ns,
                newest_ns: last.stamp_ns,
            });
        }
        if t <= first.stamp_ns {
            return sample_matrix(first);
        }
        if t >= last.stamp_ns {
            return sample_matrix(last);
        }
        let hi = self.samples.partition_point(|x| x.stamp_ns < t);
        let b = &self.samples[hi];
        if b.stamp_ns == t {
            return sample_matrix(b);
        }
        let a = &self.samples[hi - 1];
        let f = (t - a.stamp_ns) as f64 / (b.stamp_ns - a.stamp_ns) as f64;
        let q = slerp(a.rotation, b.rotation, f).map_err(|e| TfError::InvalidInput(e.to_string()))?;
        let p = a.translation.lerp(b.translation, f);
        Mat4::from_pose(p, q).map_err(|e| TfError::InvalidInput(e.to_string()))
    }
}

fn sample_matrix(s: &Sample) -> Result<Mat4> {
    Mat4::from_pose(s.translation, s.rotation).map_err(|e| TfError::InvalidInput(e.to_string()))
}

/// Per-edge, time-sorted transform history with tree lookup.
#[derive(Debug, Clone)]
pub struct TfBuffer {
    edges: HashMap<String, Edge>,
    cache_duration_ns: i64,
    reparent_events: Vec<(String, String, String)>,
}

impl Default for TfBuffer {
    fn default() -> Self {
        TfBuffer::new(DEFAULT_CACHE_DURATION_NS)
    }
}

impl TfBuffer {
    pub fn new(cache_duration_ns: i64) -> Self {
        TfBuffer {
            edges: HashMap::new(),
            cache_duration_ns,
            reparent_events: Vec::new(),
        }
    }

    pub fn cache_duration_ns(&self) -> i64 {
        self.cache_duration_ns
    }

    /// Inserts a sample. A child that already hangs under a different parent
    /// is moved to the new parent (its history is discarded) and the event is
    /// recorded in [`TfBuffer::reparent_events`].
    pub fn insert(&mut self, t: &TransformStamped) -> Result<()> {
        t.validate()?;
        // Walking up from the parent must not reach the child.
        let mut cur = t.parent_frame.as_str();
        while let Some(e) = self.edges.get(cur) {
            if e.parent == t.child_frame {
                return Err(TfError::Cycle {
                    parent: t.parent_frame.clone(),
                    child: t.child_frame.clone(),
                });
            }
            cur = &e.parent;
        }
        let sample = Sample {
            stamp_ns: t.stamp_ns,
            translation: t.translation,
            rotation: t.rotation.canonical(),
        };
        let edge = self.edges.entry(t.child_frame.clone()).or_insert_with(|| Edge {
            parent: t.parent_frame.clone(),
            samples: VecDeque::new(),
        });
        if edge.parent != t.parent_frame {
            log::warn!(
                "frame '{}' re-parented from '{}' to '{}'",
                t.child_frame,
                edge.parent,
                t.parent_frame
            );
            self.reparent_events.push((
                t.child_frame.clone(),
                edge.parent.clone(),
                t.parent_frame.clone(),
            ));
            edge.parent = t.parent_frame.clone();
            edge.samples.clear();
        }
        edge.insert(sample, self.cache_duration_ns);
        Ok(())
    }

    /// `(child, old parent, new parent)` for every replaced edge.
    pub fn reparent_events(&self) -> &[(String, String, String)] {
        &self.reparent_events
    }

    pub fn has_frame(&self, frame: &str) -> bool {
        self.edges.contains_key(frame) || self.edges.values().any(|e| e.parent == frame)
    }

    pub fn parent_of(&self, frame: &str) -> Option<&str> {
        self.edges.get(frame).map(|e| e.parent.as_str())
    }

    pub fn frames(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .edges
            .iter()
            .flat_map(|(c, e)| [c.clone(), e.parent.clone()])
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// `(oldest, newest)` stamps stored for the edge above `child`.
    pub fn edge_range(&self, child: &str) -> Option<(i64, i64)> {
        let e = self.edges.get(child)?;
        Some((e.samples.front()?.stamp_ns, e.samples.back()?.stamp_ns))
    }

    fn ancestry(&self, frame: &str) -> Vec<String> {
        let mut chain = vec![frame.to_string()];
        let mut cur = frame;
        while let Some(e) = self.edges.get(cur) {
            chain.push(e.parent.clone());
            cur = &e.parent;
        }
        chain
    }

    /// Composes `T_ancestor_frame` by walking `steps` edges up from `frame`.
    fn climb(&self, chain: &[String], steps: usize, time: LookupTime) -> Result<Mat4> {
        let mut m = Mat4::IDENTITY;
        for child in chain.iter().take(steps) {
            let edge = &self.edges[child];
            m = compose(&edge.at(child, time)?, &m);
        }
        Ok(m)
    }

    /// Transform `T` with `p_target = T * p_source`.
    pub fn lookup(&self, target: &str, source: &str, time: LookupTime) -> Result<Mat4> {
        if target == source {
            return Ok(Mat4::IDENTITY);
        }
        for f in [target, source] {
            if !self.has_frame(f) {
                return Err(TfError::UnknownFrame(f.to_string()));
            }
        }
        let up_source = self.ancestry(source);
        let up_target = self.ancestry(target);
        let (si, ti) = up_source
            .iter()
            .enumerate()
            .find_map(|(i, f)| up_target.iter().position(|g| g == f).map(|j| (i, j)))
            .ok_or_else(|| TfError::Connectivity {
                target_frame: target.to_string(),
                source_frame: source.to_string(),
            })?;
        let root_source = self.climb(&up_source, si, time)?;
        let root_target = self.climb(&up_target, ti, time)?;
        let inv = invert(&root_target).map_err(|e| TfError::InvalidInput(e.to_string()))?;
        Ok(compose(&inv, &root_source))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupStatus {
    Unresolved,
    Ok,
    Extrapolation,
}

/// Mirrors `lookup(parent_frame, child_frame, LATEST)` into a scene
/// transform node on every spin.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupNode {
    pub parent_frame: String,
    pub child_frame: String,
    pub node_id: NodeId,
    pub status: LookupStatus,
    pub last_matrix: Mat4,
}

impl LookupNode {
    pub fn new(parent: impl Into<String>, child: impl Into<String>, node_id: NodeId) -> Self {
        LookupNode {
            parent_frame: parent.into(),
            child_frame: child.into(),
            node_id,
            status: LookupStatus::Unresolved,
            last_matrix: Mat4::IDENTITY,
        }
    }

    /// Runs the lookup. Returns the new matrix when it differs from the last
    /// one by more than [`CHANGE_THRESHOLD`].
    pub fn refresh(&mut self, buffer: &TfBuffer) -> Option<Mat4> {
        match buffer.lookup(&self.parent_frame, &self.child_frame, LookupTime::Latest) {
            Ok(m) => {
                self.status = LookupStatus::Ok;
                if m.max_abs_diff(&self.last_matrix) > CHANGE_THRESHOLD {
                    self.last_matrix = m;
                    Some(m)
                } else {
                    None
                }
            }
            Err(TfError::Extrapolation { .. }) => {
                self.status = LookupStatus::Extrapolation;
                None
            }
            Err(_) => {
                self.status = LookupStatus::Unresolved;
                None
            }
        }
    }
}
