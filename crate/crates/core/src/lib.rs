//! Tensor and autodiff core for a small-object detector: convolution,
//! pooling and FFT kernels on a reverse-mode tape, the partial-convolution
//! attention blocks, the space-to-depth and frequency-fusion neck, the IoU
//! loss family and detection metrics.

pub mod boxes;
pub mod conv;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod neck;
pub mod padf;
pub mod params;
pub mod pool;
pub mod tape;
pub mod tensor;

pub use boxes::{BBox, BoxError, BoxLossKind, FocalerParams};
pub use error::{Result, TensorError};
pub use params::ParamTree;
pub use tape::{ComplexVar, OpKind, Tape, Var};
pub use tensor::{Precision, Tensor};
