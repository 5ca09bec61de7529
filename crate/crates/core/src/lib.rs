//! Planar reflective symmetry estimation for 3D point clouds.
//!
//! A cloud is normalized into the unit box and voxelized into a binary
//! bird's-eye-view grid whose height cells act as channels. A global encoder
//! sees every channel at once; horizontal slabs of `2K+1` channels are fed
//! bottom-to-top through a slice encoder into a stacked ConvGRU. A shared
//! decoder regresses per-pixel 3D offsets to the symmetry plane, and a
//! differentiable homogeneous least-squares fit turns the offset points into
//! the plane `n·p = d`.

pub mod data;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod kdtree;
pub mod metrics;
pub mod network;
pub mod refine;
pub mod train;
pub mod verify;

pub use geometry::{Cloud, CloudKind, NormRecord, Plane, Rotation, Vec3};
pub use grid::{GridSpec, OccupancyGrid, Slice};
pub use metrics::GroundTruth;
pub use network::{ModelConfig, ModelParams};
