//! Time-modulated self-attention for marked temporal point processes.
//!
//! Event sequences `(t_1, c_1), …, (t_m, c_m)` are modeled by a conditional
//! intensity per event type. Each type carries a small learned kernel network
//! over elapsed time; the kernels multiply attention queries, keys, and
//! values, so timing enters the attention scores directly instead of through
//! positional encodings. The crate ships:
//!
//! - [`tensor`]: a small f64 reverse-mode autodiff engine the model is built on;
//! - [`data`]: event-sequence datasets, padded batches, quadrature samples;
//! - [`hawkes`]: exact multivariate exponential Hawkes processes — closed-form
//!   likelihood oracle and a thinning simulator for synthetic ground truth;
//! - [`kernels`]: per-type, per-head kernel networks over elapsed time;
//! - [`model`]: the attention network and intensity head;
//! - [`train`]: likelihood objective with Monte Carlo survival integral, Adam,
//!   early stopping, checkpoints, and a gradient-check harness;
//! - [`infer`]: next-event prediction by thinning and evaluation metrics;
//! - [`timeseries`]: the encoder-only forecasting variant for continuous
//!   multivariate series;
//! - [`cli`]: the command layer behind the `hawkes-attention` binary.
//!
//! See the crate examples for end-to-end usage of each capability.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod hawkes;
pub mod infer;
pub mod kernels;
pub mod model;
mod rng;
pub mod tensor;
pub mod timeseries;
pub mod train;

pub use error::{Error, Result};
