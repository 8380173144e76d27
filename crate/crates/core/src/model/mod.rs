//! Encoder-decoder model: configuration, parameters, training forward pass
//! and incremental inference.

pub mod config;
mod cost;
pub mod forward;
mod infer;
pub mod params;
mod ssru;


pub use config::{DecoderKind, FactorCombine, ModelConfig, SourceFactorSpec};
pub use cost::{decoder_step_cost, encoder_cost, sentence_cost, StepCost};
pub use forward::{forward, Batch, Example, ForwardOutput, ParamVars};
pub use infer::{DecoderState, EncoderMemory, InferenceModel, Linear, Precision, TargetFactorOutput};
pub use params::{param_schema, valid_param_name, ModelParams};
pub use ssru::ssru_cell;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Label of the first target factor position; factor streams only.
pub const SHIFT: u32 = 4;
/// Ids below this are reserved in surface streams.
pub const NUM_SPECIALS: u32 = 4;
