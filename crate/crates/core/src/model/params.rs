use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DecoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::kernels::Tensor;

pub(crate) const MAGIC: &[u8; 4] = b"SKP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// True if `name` is dot-separated segments of `[a-z0-9_]+`.
pub fn valid_param_name(name: &str) -> bool {
    !name.is_empty()
        && name.split('.').all(|seg| {
            !seg.is_empty()
                && seg
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        })
}

fn attention_params(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{w}"), vec![d, d], Init::Xavier));
    }
}

fn norm_params(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn ffn_params(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, ff: usize) {
    out.push((format!("{prefix}.w1"), vec![d, ff], Init::Xavier));
    out.push((format!("{prefix}.b1"), vec![ff], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![ff, d], Init::Xavier));
    out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
}

/// Every parameter a configuration needs, in initialization order.
pub fn param_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    out.push((
        "source.embed.surface".to_string(),
        vec![cfg.source_vocab_size, cfg.source_surface_dim()],
        Init::Xavier,
    ));
    for (i, f) in cfg.source_factor_specs.iter().enumerate() {
        out.push((
            format!("source.embed.factor{i}"),
            vec![f.vocab_size, f.embed_dim],
            Init::Xavier,
        ));
    }
    out.push((
        "target.embed.surface".to_string(),
        vec![cfg.target_vocab_size, d],
        Init::Xavier,
    ));
    for (i, &v) in cfg.target_factor_specs.iter().enumerate() {
        out.push((format!("target.embed.factor{i}"), vec![v, d], Init::Xavier));
    }
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.layer{l}");
        norm_params(&mut out, &format!("{p}.attn_norm"), d);
        attention_params(&mut out, &format!("{p}.self_attn"), d);
        norm_params(&mut out, &format!("{p}.ffn_norm"), d);
        ffn_params(&mut out, &format!("{p}.ffn"), d, cfg.ff_dim);
    }
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.layer{l}");
        norm_params(&mut out, &format!("{p}.self_norm"), d);
        match cfg.decoder_kind {
            DecoderKind::SelfAttention => attention_params(&mut out, &format!("{p}.self_attn"), d),
            DecoderKind::Ssru => {
                out.push((format!("{p}.ssru.wf"), vec![d, d], Init::Xavier));
                out.push((format!("{p}.ssru.bf"), vec![d], Init::Zeros));
                out.push((format!("{p}.ssru.w"), vec![d, d], Init::Xavier));
            }
        }
        norm_params(&mut out, &format!("{p}.cross_norm"), d);
        attention_params(&mut out, &format!("{p}.cross_attn"), d);
        norm_params(&mut out, &format!("{p}.ffn_norm"), d);
        ffn_params(&mut out, &format!("{p}.ffn"), d, cfg.ff_dim);
    }
    norm_params(&mut out, "decoder.final_norm", d);
    out.push((
        "output.bias".to_string(),
        vec![cfg.target_vocab_size],
        Init::Zeros,
    ));
    for (i, &v) in cfg.target_factor_specs.iter().enumerate() {
        out.push((format!("output.factor{i}.weight"), vec![d, v], Init::Xavier));
        out.push((format!("output.factor{i}.bias"), vec![v], Init::Zeros));
    }
    if cfg.nvs_enabled {
        out.push((
            "nvs.weight".to_string(),
            vec![d, cfg.target_vocab_size],
            Init::Xavier,
        ));
        out.push((
            "nvs.bias".to_string(),
            vec![cfg.target_vocab_size],
            Init::Zeros,
        ));
    }
    out
}

/// Named parameter store with per-name frozen flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Xavier-uniform matrices, zero biases, unit norm gains; seeded.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::new();
        for (name, shape, init) in param_schema(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Xavier => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt() as f32;
                    (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
                }
            };
            params.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(params)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if !valid_param_name(name) {
            return Err(Error::Checkpoint(format!("invalid parameter name {name:?}")));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Checks that the store holds exactly the parameters `cfg` needs.
    pub fn check_schema(&self, cfg: &ModelConfig) -> Result<()> {
        let schema = param_schema(cfg);
        for (name, shape, _) in &schema {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        if schema.len() != self.len() {
            let known: BTreeSet<&str> = schema.iter().map(|s| s.0.as_str()).collect();
            let orphan = self.names().find(|n| !known.contains(n)).unwrap_or("?");
            return Err(Error::Checkpoint(format!(
                "parameter {orphan} is not used by the config"
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for (name, t) in &self.tensors {
            write_header(w, name, t.shape())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = Cursor::new(&buf);
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a parameter file".into()));
        }
        let mut params = Self::new();
        while !cur.at_end() {
            let (name, shape) = read_header(&mut cur)?;
            let n: usize = shape.iter().product();
            let bytes = cur.take(n * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_from(&mut f)
    }
}

pub(crate) fn write_header(w: &mut impl Write, name: &str, shape: &[usize]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    write_shape(w, shape)
}

pub(crate) fn write_shape(w: &mut impl Write, shape: &[usize]) -> Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_header(cur: &mut Cursor<'_>) -> Result<(String, Vec<usize>)> {
    let len = cur.u32()? as usize;
    let name = String::from_utf8(cur.take(len)?.to_vec())
        .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
    let shape = read_shape(cur)?;
    Ok((name, shape))
}

pub(crate) fn read_shape(cur: &mut Cursor<'_>) -> Result<Vec<usize>> {
    let rank = cur.u32()? as usize;
    (0..rank).map(|_| Ok(cur.u32()? as usize)).collect()
}

/// Byte cursor for the little-endian checkpoint formats.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated parameter file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{FactorCombine, SourceFactorSpec};
    use proptest::prelude::*;

    fn full_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            ff_dim: 32,
            decoder_kind: DecoderKind::Ssru,
            source_factor_specs: vec![SourceFactorSpec {
                vocab_size: 6,
                embed_dim: 4,
                combine: FactorCombine::Concat,
            }],
            target_factor_specs: vec![7],
            nvs_enabled: true,
            source_vocab_size: 12,
            target_vocab_size: 13,
            ..Default::default()
        }
    }

    #[test]
    fn names_follow_grammar() {
        assert!(valid_param_name("encoder.layer3.ffn.w1"));
        assert!(!valid_param_name("Encoder.w"));
        assert!(!valid_param_name("a..b"));
        assert!(!valid_param_name(""));
        for (name, _, _) in param_schema(&full_config()) {
            assert!(valid_param_name(&name), "{name}");
        }
    }

    #[test]
    fn init_has_no_orphans_and_is_seeded() {
        let cfg = full_config();
        let a = ModelParams::init(&cfg, 13).unwrap();
        a.check_schema(&cfg).unwrap();
        assert_eq!(a, ModelParams::init(&cfg, 13).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 14).unwrap());

        let mut extra = a.clone();
        extra.insert("stray.weight", Tensor::zeros(&[1])).unwrap();
        assert!(extra.check_schema(&cfg).is_err());
        let other = ModelConfig {
            decoder_kind: DecoderKind::SelfAttention,
            ..cfg
        };
        assert!(a.check_schema(&other).is_err());
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let cfg = full_config();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        assert!(ModelParams::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        assert!(ModelParams::read_from(&mut &b"XXXX"[..]).is_err());
    }

    proptest! {
        #[test]
        fn parameter_file_round_trips(values in proptest::collection::vec(-1e6f32..1e6, 1..40), seed in 0u64..100) {
            let cfg = ModelConfig { d_model: 8, heads: 2, ff_dim: 8, encoder_layers: 1, decoder_layers: 1, source_vocab_size: 5, target_vocab_size: 5, ..Default::default() };
            let mut p = ModelParams::init(&cfg, seed).unwrap();
            p.insert("extra.v", Tensor::vector(values)).unwrap();
            let mut bytes = Vec::new();
            p.write_to(&mut bytes).unwrap();
            prop_assert_eq!(&bytes[..4], b"SKP1");
            let q = ModelParams::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(p, q);
        }
    }
}
