//! Relightable neural-field reconstruction for outdoor scenes.
//!
//! The pipeline optimizes a scene decomposition — per-point albedo, normal,
//! semantic logits, density, and a sun-visibility guide — from posed images
//! taken under a single known sun direction, then re-renders the scene under
//! a moved sun, under night spotlights, or with a triangle mesh inserted.
//!
//! Module map:
//! - [`geom`]: cameras, rays, boxes, triangles, meshes, stratified sampling.
//! - [`fields`]: hash-grid + MLP scene model, parameter groups, checkpoints.
//! - [`grad`]: reverse-mode tape over tensor-valued ops, finite-difference
//!   gradient checking.
//! - [`lighting`]: sun/sky environments and spotlights.
//! - [`renderer`]: volumetric intrinsics, shadow rays, shading, image loops.
//! - [`trainer`]: losses, Adam, the optimization loop, evaluation metrics.
//! - [`oracle`]: an analytic reference scene (exact renders and ground truth)
//!   used to generate datasets and to judge recovery.
//! - [`editor`]: relighting, night rendering, object insertion.
//! - [`io`]: dataset manifests, PNG/PFM image I/O, light rigs, run configs.

pub mod cli;
pub mod editor;
pub mod fields;
pub mod geom;
pub mod grad;
pub mod io;
pub mod lighting;
pub mod oracle;
pub mod renderer;
pub mod trainer;
