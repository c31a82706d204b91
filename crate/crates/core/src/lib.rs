//! Design-based estimators of average treatment effects for baseline
//! subgroups in randomized controlled trials.
//!
//! The crate treats potential outcomes as fixed and the randomization as the
//! only source of randomness. Subgroup effects are ratio estimators because
//! the number of subgroup members landing in each arm is random; the variance
//! formulas here account for that, with options for expected or realized arm
//! sizes, the small-sample subgroup correction, heterogeneity bounds, and
//! finite-sample allocation moments.
//!
//! Layout:
//! - [`data`]: trial records, design description, validation, CSV I/O
//! - [`design_math`]: hypergeometric allocation laws and the actual-vs-expected
//!   size curves
//! - [`linear_fit`]: design matrices and a Householder least-squares solver
//! - [`estimators`]: point estimators for simple, blocked, clustered and
//!   nonresponse-weighted analyses
//! - [`variance`]: design-based and sandwich variance estimators
//! - [`inference`]: t/z tests, intervals and the equal-effects Wald test
//! - [`simulation`]: the seeded finite-population Monte Carlo engine
//! - [`analysis`]: one-call orchestration used by the command-line tool
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`
//! (and `f32` for the most common types).

pub mod analysis;
pub mod data;
pub mod design_math;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linear_fit;
pub mod scalar;
pub mod simulation;
pub mod variance;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Toolkit version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Dataset = data::Dataset<f64>;
pub type UnitRecord = data::UnitRecord<f64>;
pub type Sample = linear_fit::Sample<f64>;
pub type Fit = linear_fit::Fit<f64>;
pub type SubgroupEstimate = estimators::SubgroupEstimate<f64>;
pub type BlockEstimate = estimators::BlockEstimate<f64>;
pub type VarianceEstimate = variance::VarianceEstimate<f64>;
pub type AnalysisResult = analysis::AnalysisResult<f64>;

pub type Dataset32 = data::Dataset<f32>;
pub type Sample32 = linear_fit::Sample<f32>;
pub type Fit32 = linear_fit::Fit<f32>;
pub type SubgroupEstimate32 = estimators::SubgroupEstimate<f32>;
