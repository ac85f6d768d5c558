//! Federated learning with low-rank, quantized gradient uploads.
//!
//! Clients factor each gradient (truncated SVD for matrices, Tucker for
//! convolution kernels), quantize the factors against the previous round's
//! values and send the codes. The server mirrors every client's quantizer
//! state, rebuilds the gradients and takes one descent step with their sum.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`, which is what the simulator uses by
//! default.

pub mod codec;
pub mod data;
pub mod decomp;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod kernels;
pub mod linalg;
pub mod nn;
pub mod quant;
pub mod scalar;
pub mod tensor;

pub use codec::{CodecConfig, CodecLedger, CompressionMode, UpdateMessage};
pub use decomp::ParamKind;
pub use error::{QrrError, Result};
pub use experiment::ExperimentConfig;
pub use fl::{Aggregation, Algorithm, FlConfig, LrSchedule, RoundMetrics};
pub use nn::Arch;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ModelParams = nn::ModelParams<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Batch = nn::Batch<f64>;
pub type Ledger = codec::CodecLedger<f64>;
pub type QuantState = quant::QuantState<f64>;
pub type SvdResult = linalg::SvdResult<f64>;
pub type Simulation = fl::Simulation<f64>;
