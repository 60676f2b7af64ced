//! Instance-wise ordered transformers.
//!
//! An encoder-decoder transformer whose sublayer order (self-attention,
//! encoder-decoder attention, feed-forward) is picked per input sequence by
//! a small linear predictor. All candidate orders share one set of block
//! weights; the predictor is trained through Gumbel-softmax weighted path
//! losses plus exploration and exploitation regularizers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod routing;
pub mod studies;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
