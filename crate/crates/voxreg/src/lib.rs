//! Multimodal 3D volume registration.
//!
//! Aligns a functional (PET-like) volume to an anatomical (MRI-like) volume in
//! two stages: a global 12-DOF affine registration initialized from
//! intensity-weighted principal axes of the sigmoid-remapped functional
//! volume, followed by a local cubic B-spline free-form deformation. Both
//! stages maximize normalized mutual information over a Gaussian image
//! pyramid.
//!
//! All numeric code is generic over the scalar type via [`scalar::Real`]
//! (f32 or f64); the aliases at the crate root pin the f64 instantiation the
//! command-line tools use.

pub mod error;
pub mod scalar;

pub mod interp;
pub mod metric;
pub mod optimize;
pub mod pca;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod pyramid;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;

/// f64 volume, the default scalar for the CLI and pipeline entry points.
pub type Volume = volume::Volume<f64>;
pub type Geometry = volume::Geometry<f64>;
pub type SigmoidParams = preprocess::SigmoidParams<f64>;
pub type PrincipalAxes = pca::PrincipalAxes<f64>;
pub type AffineTransform = transform::AffineTransform<f64>;
pub type BSplineFfd = transform::BSplineFfd<f64>;
pub type SpatialTransform = transform::SpatialTransform<f64>;
// pub type MetricConfig = metric::MetricConfig<f64>;
// pub type RegistrationConfig = pipeline::RegistrationConfig<f64>;
// pub type RegistrationResult = pipeline::RegistrationResult<f64>;
// pub type PhantomSpec = phantom::PhantomSpec<f64>;
// pub type GroundTruth = phantom::GroundTruth<f64>;
