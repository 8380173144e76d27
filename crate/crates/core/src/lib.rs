//! A compact neural machine translation engine.
//!
//! Transformer encoders with self-attention or SSRU decoders, source and
//! target factors, prefix-forced beam and greedy search, lexical shortlists,
//! neural vocabulary selection, INT8 dynamic quantization, sharded binary
//! training data, parameter freezing and checkpoint averaging.

pub mod dataprep;
pub mod error;
pub mod kernels;
pub mod model;
pub mod quant;
pub mod search;
pub mod shortlist;
pub mod trainer;

pub use error::{Error, Result};
