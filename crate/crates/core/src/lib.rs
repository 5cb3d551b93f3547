//! Regional epidemic forecasting with inter- and intra-series embedding
//! fusion.
//!
//! The model runs a multi-scale convolution plus self-attention across
//! regions, an LSTM along each region's history, fuses both embeddings with
//! learnable gates and adds a linear autoregressive head. Everything is
//! differentiated by the small array tape in [`tensor`].

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ArrayId, ComputeTape, DiffArray, Mode};
