//! Neural intersection functions for ray tracing, trained per object on CPU.
//!
//! An object is voxelized into a coarse surface-occupancy grid. A ray is
//! walked through that grid, the entry points of the occupied voxels are
//! encoded with a sparse multi-resolution hash grid, and a small multi-head
//! MLP predicts occlusion, hit distance, normal, albedo and material. The
//! trained bundle stands in for the object's bottom-level BVH in a path
//! tracer, which also ships a BVH reference path to validate against.

pub mod bvh;
pub mod dda;
pub mod encoding;
pub mod fixtures;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod model_io;
pub mod par;
pub mod renderer;
pub mod training;
pub mod voxelizer;

pub use geometry::{Aabb, LocalFrame, Material, MaterialKind, Mesh, Ray, Transform, Vec3};
pub use par::Parallelism;
