//! Stereo disparity estimation with state-space feature extraction.
//!
//! The crate is organised bottom-up: dense tensors and a reverse-mode tape
//! ([`tensor`], [`graph`]), the scalar-decay state space model ([`ssm`]),
//! the network ([`model`]), group-wise correlation ([`cost_volume`]),
//! disparity regression ([`regress`]), data handling ([`data`]), metrics
//! ([`metrics`]) and the training loop ([`train`]).

pub mod bench;
pub mod cli;
pub mod cost_volume;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod regress;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, ParseKind, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
