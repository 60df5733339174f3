pub mod audio;
pub mod container;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod masks;
pub mod motion;
pub mod nn;
pub mod train;

pub use candle_core::DType;
pub use error::{Error, Result};
