//! Publish/subscribe bridge between a robotics-style node graph and an
//! observable scene model.
//!
//! * [`geometry`]: quaternions, homogeneous matrices, interpolation.
//! * [`scene`]: observable scene with a transform hierarchy.
//! * [`codec`]: wire values, scene conversions and the binary frame format.
//! * [`tf`]: timestamped transform tree with interpolated lookup.
//! * [`bus`]: nodes, topics, parameters and the TCP transport.
//! * [`robot`]: URDF and STL loading, forward kinematics, robot scene nodes.
//! * [`fixture`]: forbidden-region checks against closed meshes.
//! * [`harness`]: simulated device, trajectory relay, demos and benchmarks.

pub mod bus;
pub mod codec;
pub mod fixture;
pub mod geometry;
pub mod harness;
pub mod robot;
pub mod scene;
pub mod tf;
