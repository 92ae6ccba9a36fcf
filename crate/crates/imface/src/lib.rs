//! Implicit morphable face model: deformation-field SDFs with a detail
//! displacement stage, plus the geometry, training, and evaluation tooling
//! around them.

pub mod diffcore;
pub mod error;
pub mod fields;
pub mod geom;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod recon;
pub mod training;
pub mod seeds;
pub mod synth;

pub use error::ImfaceError;
