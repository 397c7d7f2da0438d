pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
mod fmt;
mod kernels;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
