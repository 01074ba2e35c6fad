pub mod dataprep;
pub mod error;
pub mod geometry;
pub mod geostat;
pub mod gmrf;
pub mod graph;
pub mod inference;
pub mod linalg;
pub mod loess;
pub mod model;
pub mod optim;
pub mod risk;
pub mod scalar;
pub mod sparse;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` instantiations of the generic numeric types.
pub type StructureMatrix = gmrf::StructureMatrix<f64>;
pub type ConstraintSet = gmrf::ConstraintSet<f64>;
pub type RandomEffectBlock = gmrf::RandomEffectBlock<f64>;
pub type CsrMatrix = sparse::CsrMatrix<f64>;
pub type StationValue = geostat::StationValue<f64>;
pub type VariogramModel = geostat::VariogramModel<f64>;
pub type OrdinaryKriging = geostat::OrdinaryKriging<f64>;
pub type SmoothedSeries = loess::SmoothedSeries<f64>;
