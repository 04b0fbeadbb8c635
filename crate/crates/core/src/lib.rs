//! SepFormer-style speech separation on a small, fully inspectable engine.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod params;
pub mod separator;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use params::{ParamList, Parameterized};
pub use tensor::{no_grad, Tensor};
