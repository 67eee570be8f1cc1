//! Exact reconstruction of a client's input batch from the gradients of a
//! fully connected ReLU layer.
//!
//! The pipeline is split into five modules:
//!
//! * [`fcnn`] simulates the federated client: networks, forward/backward
//!   passes, DP-SGD clipping/noise and FedAvg weight updates.
//! * [`lowrank`] factorizes a weight gradient as `L * R`, infers the batch size
//!   and turns a disaggregation matrix into inputs and output gradients.
//! * [`sampler`] proposes direction candidates as kernels of random row
//!   submatrices of `L` and filters them by induced sparsity.
//! * [`selector`] picks the final `b` directions greedily by the sparsity
//!   matching coefficient and drives the end-to-end attack.
//! * [`analysis`] holds the closed-form sampling cost and failure-probability
//!   predictors together with Monte-Carlo validators.
//!
//! All numerical code is generic over [`Real`]; the aliases below fix the
//! scalar to `f64`, which is what the experiment harness uses.

pub mod analysis;
pub mod error;
pub mod fcnn;
pub mod lowrank;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod selector;

pub use error::{Result, SpearError};
pub use scalar::Real;

pub type Matrix<T> = nalgebra::DMatrix<T>;
pub type Vector<T> = nalgebra::DVector<T>;

pub type Matrix64 = Matrix<f64>;
pub type Vector64 = Vector<f64>;
pub type Network64 = fcnn::NetworkParams<f64>;
pub type Batch64 = fcnn::Batch<f64>;
pub type Gradients64 = fcnn::GradientCapture<f64>;
pub type Factors64 = lowrank::LowRankFactors<f64>;
pub type Candidate64 = sampler::DirectionCandidate<f64>;
pub type Reconstruction64 = selector::ReconstructionResult<f64>;

pub type Matrix32 = Matrix<f32>;
pub type Network32 = fcnn::NetworkParams<f32>;
pub type Factors32 = lowrank::LowRankFactors<f32>;
