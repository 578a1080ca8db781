pub mod autodiff;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod spectral;
pub mod stability;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use matrix::Matrix;
