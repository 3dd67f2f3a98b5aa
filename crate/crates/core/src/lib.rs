//! Phoneme-level residual-vector-quantized prosody codec.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod quantizer;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type TensorF32 = autodiff::Tensor<f32>;
pub type TensorF64 = autodiff::Tensor<f64>;
pub type RvqF32 = quantizer::Rvq<f32>;
pub type RvqF64 = quantizer::Rvq<f64>;
pub type CodecModelF32 = model::CodecModel<f32>;
pub type CodecModelF64 = model::CodecModel<f64>;
pub type TrainStateF32 = trainer::TrainState<f32>;
pub type TrainStateF64 = trainer::TrainState<f64>;
