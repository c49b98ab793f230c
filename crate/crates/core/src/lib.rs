//! Retail shelf empty-space detection: synthetic data, evaluation,
//! inference benchmarking and a message-bus detection service.
//!
//! Geometry and evaluation are generic over [`Scalar`]; the aliases below
//! pick the common instantiations.

pub mod bench;
pub mod dataset;
pub mod detector;
pub mod eval;
pub mod geometry;
pub mod raster;
pub mod scalar;
pub mod serve;
pub mod synthgen;

pub use scalar::{Rational, Scalar};

pub type BBox = geometry::BBox<f64>;
pub type BBoxF32 = geometry::BBox<f32>;
pub type ExactBBox = geometry::BBox<Rational>;
pub type NormBox = geometry::NormBox<f64>;
pub type Detection = geometry::Detection<f64>;
pub type DetectionF32 = geometry::Detection<f32>;
pub type ExactDetection = geometry::Detection<Rational>;
pub type LetterboxTransform = geometry::LetterboxTransform<f64>;
pub type GroundTruth = eval::GroundTruth<f64>;
pub type ExactGroundTruth = eval::GroundTruth<Rational>;
pub type EvalReport = eval::EvalReport<f64>;
pub type ExactEvalReport = eval::EvalReport<Rational>;
