pub mod backbone;
pub mod bd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ggb;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod params;
pub mod run;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use tensor::Tensor;
