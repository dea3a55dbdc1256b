//! Domain-incremental segmentation with style-oriented generative replay and
//! domain-sensitive feature whitening, at desk scale on synthetic data.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod report;
pub mod tensor;
pub mod trainer;
pub mod whitening;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
