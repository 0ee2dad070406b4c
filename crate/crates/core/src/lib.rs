//! Core library for SC-MII: split 3D object detection over multiple
//! infrastructure LiDARs.
//!
//! Edge roles run the head of a voxel detector on local point clouds and ship
//! compact intermediate feature tensors over a binary protocol; a server role
//! aligns them into a common frame (extrinsics come from NDT scan matching),
//! integrates them by per-voxel max or concat+conv, and finishes inference.
//! A virtual-clock simulator models end-to-end latency against an edge-only
//! baseline, and the eval module scores detections by 3D IoU / AP.

pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod ndt;
pub mod pointcloud;
pub mod protocol;
pub mod runtime;
pub mod scene;
pub mod sparse;

pub use geometry::{CalibrationFile, Pose6DoF, RigidTransform};
pub use pointcloud::{CloudFormat, PointCloud};
pub use sparse::{GridSpec, SparseFeatureTensor};
