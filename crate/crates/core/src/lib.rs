pub mod augment;
pub mod batch;
pub mod curvature;
pub mod data;
pub mod error;
pub mod hypergrad;
pub mod laplace;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod train;

pub use error::{Error, Result};
