//! Federated training of a shared segmentation backbone with per-client
//! heads over partially labeled synthetic data, and uncertainty-weighted
//! ensemble inference that recovers labels unseen at individual clients.
//!
//! The numeric kernels are generic over the scalar type ([`Scalar`],
//! implemented for f32 and f64); the dtype is a run-level switch.

pub mod error;
pub mod fed;
pub mod funt;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod numfmt;
pub mod registry;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod uq;

pub use error::{Error, Result};
pub use registry::{ClientId, LabelRegistry};
pub use rng::RngState;
pub use scalar::{Dtype, Scalar};
pub use tensor::{DynTensor, LabelMap, Tensor};

/// Concrete aliases for the two supported element types.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelParams32 = nn::ModelParams<f32>;
pub type ModelParams64 = nn::ModelParams<f64>;
