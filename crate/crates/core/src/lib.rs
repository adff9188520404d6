pub mod circuit;
pub mod circuit_file;
pub mod coefficients;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod linalg;
pub mod liouville;
pub mod magnus;
pub mod mitigation;
pub mod pauli;
pub mod presets;
pub mod shots;

pub use error::{Error, Result};
