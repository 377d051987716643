pub mod augment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod run;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use model::{DenseNetConfig, Model};
pub use tensor::{DType, Real, Tensor};
