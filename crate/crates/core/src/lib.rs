//! PlainSeg: minimalist semantic segmentation over plain Vision Transformers.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Segmenter32 = model::Segmenter<f32>;
pub type Segmenter64 = model::Segmenter<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
