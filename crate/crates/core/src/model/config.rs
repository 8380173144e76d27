use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    SelfAttention,
    Ssru,
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_attention" => Ok(Self::SelfAttention),
            "ssru" => Ok(Self::Ssru),
            other => Err(Error::Config(format!("unknown decoder kind {other:?}"))),
        }
    }
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SelfAttention => "self_attention",
            Self::Ssru => "ssru",
        }
    }
}

/// How a source factor embedding joins the surface embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FactorCombine {
    #[default]
    Sum,
    Concat,
}

impl FromStr for FactorCombine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("unknown factor combine rule {other:?}"))),
        }
    }
}

impl FactorCombine {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Concat => "concat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceFactorSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub combine: FactorCombine,
}

/// Architecture hyperparameters.
///
/// Serialized as `key = value` lines whose keys are exactly the field names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub decoder_kind: DecoderKind,
    pub source_factor_specs: Vec<SourceFactorSpec>,
    /// Vocabulary size of each target factor stream.
    pub target_factor_specs: Vec<usize>,
    pub nvs_enabled: bool,
    pub max_seq_len: usize,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            decoder_kind: DecoderKind::SelfAttention,
            source_factor_specs: Vec::new(),
            target_factor_specs: Vec::new(),
            nvs_enabled: false,
            max_seq_len: 100,
            source_vocab_size: 32,
            target_vocab_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.ff_dim == 0 || self.max_seq_len == 0 {
            return bad("d_model, ff_dim and max_seq_len must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder_layers and decoder_layers must be at least 1".into());
        }
        if self.source_vocab_size < 4 || self.target_vocab_size < 4 {
            return bad("vocabularies must hold the reserved ids".into());
        }
        for (i, f) in self.source_factor_specs.iter().enumerate() {
            if f.vocab_size == 0 || f.embed_dim == 0 {
                return bad(format!("source factor {i} has an empty vocabulary or dimension"));
            }
            if f.combine == FactorCombine::Sum && f.embed_dim != self.d_model {
                return bad(format!(
                    "source factor {i} is summed but its dimension {} differs from d_model {}",
                    f.embed_dim, self.d_model
                ));
            }
        }
        let concat: usize = self.concat_factor_dims();
        if concat >= self.d_model {
            return bad(format!(
                "concatenated factor dimensions {concat} leave no room in d_model {}",
                self.d_model
            ));
        }
        if self.target_factor_specs.iter().any(|&v| v < 5) {
            return bad("target factor vocabularies must hold the reserved ids".into());
        }
        Ok(())
    }

    fn concat_factor_dims(&self) -> usize {
        self.source_factor_specs
            .iter()
            .filter(|f| f.combine == FactorCombine::Concat)
            .map(|f| f.embed_dim)
            .sum()
    }

    /// Width of the source surface embedding (d_model minus concatenated factors).
    pub fn source_surface_dim(&self) -> usize {
        self.d_model - self.concat_factor_dims()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sf = self
            .source_factor_specs
            .iter()
            .map(|f| format!("{}:{}:{}", f.vocab_size, f.embed_dim, f.combine.as_str()))
            .collect::<Vec<_>>()
            .join(",");
        let tf = self
            .target_factor_specs
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "ff_dim = {}", self.ff_dim);
        let _ = writeln!(s, "encoder_layers = {}", self.encoder_layers);
        let _ = writeln!(s, "decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "decoder_kind = {}", self.decoder_kind.as_str());
        let _ = writeln!(s, "source_factor_specs = {sf}");
        let _ = writeln!(s, "target_factor_specs = {tf}");
        let _ = writeln!(s, "nvs_enabled = {}", self.nvs_enabled);
        let _ = writeln!(s, "max_seq_len = {}", self.max_seq_len);
        let _ = writeln!(s, "source_vocab_size = {}", self.source_vocab_size);
        let _ = writeln!(s, "target_vocab_size = {}", self.target_vocab_size);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("config key {key}: bad integer {value:?}")))
            };
            match key {
                "d_model" => cfg.d_model = num()?,
                "heads" => cfg.heads = num()?,
                "ff_dim" => cfg.ff_dim = num()?,
                "encoder_layers" => cfg.encoder_layers = num()?,
                "decoder_layers" => cfg.decoder_layers = num()?,
                "decoder_kind" => cfg.decoder_kind = value.parse()?,
                "source_factor_specs" => {
                    cfg.source_factor_specs = split_list(value)
                        .map(|item| {
                            let parts: Vec<&str> = item.split(':').collect();
                            if parts.len() != 3 {
                                return Err(Error::Config(format!("bad source factor spec {item:?}")));
                            }
                            let p = |s: &str| {
                                s.parse::<usize>().map_err(|_| {
                                    Error::Config(format!("bad source factor spec {item:?}"))
                                })
                            };
                            Ok(SourceFactorSpec {
                                vocab_size: p(parts[0])?,
                                embed_dim: p(parts[1])?,
                                combine: parts[2].parse()?,
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "target_factor_specs" => {
                    cfg.target_factor_specs = split_list(value)
                        .map(|v| {
                            v.parse()
                                .map_err(|_| Error::Config(format!("bad target factor spec {v:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                "nvs_enabled" => {
                    cfg.nvs_enabled = value
                        .parse()
                        .map_err(|_| Error::Config(format!("nvs_enabled: bad flag {value:?}")))?
                }
                "max_seq_len" => cfg.max_seq_len = num()?,
                "source_vocab_size" => cfg.source_vocab_size = num()?,
                "target_vocab_size" => cfg.target_vocab_size = num()?,
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
            seen.insert(key.to_string());
        }
        if seen.len() != 12 {
            return Err(Error::Config(format!(
                "config is missing keys (found {})",
                seen.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = ModelConfig {
            decoder_kind: DecoderKind::Ssru,
            source_factor_specs: vec![
                SourceFactorSpec {
                    vocab_size: 7,
                    embed_dim: 64,
                    combine: FactorCombine::Sum,
                },
                SourceFactorSpec {
                    vocab_size: 5,
                    embed_dim: 8,
                    combine: FactorCombine::Concat,
                },
            ],
            target_factor_specs: vec![6],
            nvs_enabled: true,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.source_surface_dim(), 56);
    }

    #[test]
    fn deep_shallow_and_standard_depths_are_valid() {
        for (e, d) in [(6, 6), (20, 2)] {
            let cfg = ModelConfig {
                encoder_layers: e,
                decoder_layers: d,
                ..Default::default()
            };
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let summed_wrong_dim = ModelConfig {
            source_factor_specs: vec![SourceFactorSpec {
                vocab_size: 5,
                embed_dim: 8,
                combine: FactorCombine::Sum,
            }],
            ..Default::default()
        };
        assert!(summed_wrong_dim.validate().is_err());
        let heads = ModelConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(heads.validate().is_err());
        assert!(ModelConfig::from_text("d_model = 64\n").is_err());
        assert!(ModelConfig::from_text("bogus = 1\n").is_err());
    }
}
