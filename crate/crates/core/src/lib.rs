//! Two-stream video action classification toolkit.
//!
//! The crate covers the full pipeline at desk scale: dense optical-flow
//! estimation and 8-bit archiving, multi-frame flow input volumes (plain,
//! trajectory-sampled, bidirectional, mean-subtracted), small trainable
//! ConvNets with SGD + momentum and the stock learning-rate schedules,
//! multi-task training with per-dataset softmax heads, and late fusion of
//! the spatial and temporal streams with a full evaluation harness.
//!
//! Data-parallel inner loops run on rayon by default; build with
//! `--no-default-features` for the sequential fallback. Both backends
//! produce bit-identical results.

pub mod config;
pub mod error;
pub mod flow;
pub mod fsio;
pub mod multitask;
pub mod net;
pub mod parallel;
pub mod pnm;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{ElemOp, Scalar, Tensor, TensorBase};
