//! Occupancy-plane radiance fields for oblique aerial capture.
//!
//! This crate holds the numerical core of the pipeline and builds without
//! `std` (it only needs `alloc`):
//!
//! * [`scene`]: the explicit voxel-grid plus triplane feature field.
//! * [`occupancy`]: the height-field occupancy plane, its ramp function,
//!   compression loss and the conservative max-pooled pyramid.
//! * [`render`]: occupancy-culled sampling, occupancy-modulated alpha
//!   compositing and deferred view-dependent shading, with exact adjoints.
//! * [`shader`]: the small deferred shading network.
//! * [`losses`]: photometric, smoothness, sparsity and entropy objectives.
//! * [`objective`]: the weighted per-batch training objective.
//! * [`optim`]: Adam and the learning-rate / occupancy-weight schedules.
//! * [`bake`]: occupied-voxel extraction, quantized asset baking and the
//!   hierarchical empty-space-skipping marcher.
//! * [`synth`]: analytic ground-truth scenes and camera trajectories.
//! * [`metrics`]: PSNR and SSIM.
//! * [`gradcheck`]: finite-difference checks of every adjoint.
//!
//! File formats, the training loop, and the command line live in the
//! companion `oblique` crate.

#![no_std]

extern crate alloc;

pub mod bake;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod objective;
pub mod occupancy;
pub mod optim;
pub mod render;
pub mod scene;
pub mod shader;
pub mod synth;

pub use error::{Error, Result};
pub use math::{Aabb, Real, Vec3};
