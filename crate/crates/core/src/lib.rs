pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod intervention;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pca;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
