//! Ray denoising for query-based multi-view 3D detection.
//!
//! Hard-negative "ray queries" are sampled along the camera ray through each
//! ground-truth center with Beta-distributed depth offsets, labeled (one
//! positive per ray), appended to the decoder's object queries behind an
//! attention mask, and supervised with a denoising loss. The crate bundles
//! the camera geometry, the Beta sampler, the query builder, a small
//! trainable detector with its own autodiff tape, a synthetic scene
//! generator that reproduces colinear depth ambiguity, and evaluation.
//!
//! Math is generic over [`Real`] (`f32`/`f64`); the aliases below fix the
//! double-precision types used by the pipeline and file formats.

pub mod beta;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod masking;
pub mod raydn;
pub mod rng;
pub mod scalar;
pub mod scenes;
pub mod toynet;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Vec3f = geometry::Vec3<f64>;
pub type Mat4f = geometry::Mat4<f64>;
pub type Camera = geometry::CameraModel<f64>;
pub type Box3 = raydn::GroundTruthBox<f64>;
pub type RayGroup = raydn::RayQueryGroup<f64>;
