//! Analytic multiply-accumulate counts for decoding.

use super::config::{DecoderKind, ModelConfig};

/// MACs of one decode step, split by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepCost {
    pub self_block: u64,
    pub cross_attention: u64,
    pub feed_forward: u64,
    pub output: u64,
}

impl StepCost {
    /// Cost of the decoder layers alone.
    pub fn layers(&self) -> u64 {
        self.self_block + self.cross_attention + self.feed_forward
    }

    pub fn total(&self) -> u64 {
        self.layers() + self.output
    }
}

/// MACs to produce output token `step` (0-based) against a source of
/// `src_len` positions.
///
/// Per layer: self-attention `4d² + 2(t+1)d`, SSRU `2d² + 2d`,
/// cross-attention `2d² + 2Sd` (keys and values are cached), FFN `2d·ff`.
/// Output: `d·V` plus each factor output layer.
pub fn decoder_step_cost(cfg: &ModelConfig, step: usize, src_len: usize) -> StepCost {
    let d = cfg.d_model as u64;
    let l = cfg.decoder_layers as u64;
    let t = step as u64;
    let s = src_len as u64;
    let self_block = match cfg.decoder_kind {
        DecoderKind::SelfAttention => 4 * d * d + 2 * (t + 1) * d,
        DecoderKind::Ssru => 2 * d * d + 2 * d,
    };
    let vocab = cfg.target_vocab_size as u64 + cfg.target_factor_specs.iter().map(|&v| v as u64).sum::<u64>();
    StepCost {
        self_block: l * self_block,
        cross_attention: l * (2 * d * d + 2 * s * d),
        feed_forward: l * 2 * d * cfg.ff_dim as u64,
        output: d * vocab,
    }
}

/// MACs to encode `src_len` positions, including the decoder's cross-attention
/// key and value projections.
pub fn encoder_cost(cfg: &ModelConfig, src_len: usize) -> u64 {
    let d = cfg.d_model as u64;
    let s = src_len as u64;
    let per_layer = 4 * d * d * s + 2 * s * s * d + 2 * d * cfg.ff_dim as u64 * s;
    cfg.encoder_layers as u64 * per_layer + cfg.decoder_layers as u64 * 2 * d * d * s
}

/// MACs to translate a `src_len` source into `out_len` tokens.
pub fn sentence_cost(cfg: &ModelConfig, src_len: usize, out_len: usize) -> u64 {
    encoder_cost(cfg, src_len) + (0..out_len).map(|t| decoder_step_cost(cfg, t, src_len).total()).sum::<u64>()
}
