//! Articulated mixtures of volumetric primitives.
//!
//! A skinned template mesh carries a `W x W` texel grid; every valid texel owns one
//! oriented voxel box whose placement follows the posed surface. Texel-aligned pose,
//! image and view features feed a per-texel affine decoder that emits payloads and
//! placement correctives, and a differentiable ray marcher renders the mixture.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the common choices.

pub mod accel;
pub mod atlas;
pub mod camera;
pub mod error;
pub mod features;
pub mod fit;
pub mod formats;
pub mod gradcheck;
pub mod imaging;
pub mod lbs;
pub mod loss;
pub mod optim;
pub mod primitives;
pub mod render;
pub mod rotation;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Camera64 = camera::Camera<f64>;
pub type Camera32 = camera::Camera<f32>;
pub type PrimitiveSet64 = primitives::PrimitiveSet<f64>;
pub type PrimitiveSet32 = primitives::PrimitiveSet<f32>;
pub type TemplateMesh64 = lbs::TemplateMesh<f64>;
pub type TemplateMesh32 = lbs::TemplateMesh<f32>;
pub type Skeleton64 = lbs::Skeleton<f64>;
pub type Pose64 = lbs::Pose<f64>;
pub type DecoderParams64 = features::DecoderParams<f64>;
pub type DecoderParams32 = features::DecoderParams<f32>;
pub type RenderConfig64 = render::RenderConfig<f64>;
pub type RenderConfig32 = render::RenderConfig<f32>;
pub type Image64 = imaging::Image<f64>;
pub type Image32 = imaging::Image<f32>;
