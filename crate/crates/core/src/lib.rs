//! Split-federated learning over noisy links.
//!
//! The numeric core (`autograd`, `model`, `aggregation`) is generic over the
//! scalar type; the protocol and harness run in `f64`. The aliases below name
//! the `f64` instantiations.

pub mod aggregation;
pub mod autograd;
pub mod channel;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autograd::Tensor<f64>;
pub type Graph = autograd::Graph<f64>;
pub type ParamSet = model::ParamSet<f64>;
pub type SplitModelWeights = model::SplitModelWeights<f64>;
pub type ClientWeights = model::ClientWeights<f64>;
pub type AdamState = model::AdamState<f64>;
