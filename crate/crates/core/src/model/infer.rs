//! Incremental FP32/INT8 inference.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::config::{DecoderKind, FactorCombine, ModelConfig};
use super::forward::output_scale;
use super::params::ModelParams;
use super::ssru::ssru_update;
use crate::error::{Error, Result};
use crate::kernels::{
    add_bias, attend, dot, layer_norm, log_softmax_in_place, matmul, position_row, AttnMask, Tensor,
    LAYER_NORM_EPS,
};
use crate::quant::{quantize_linear, quantized_matmul, QuantEntry, QuantizedLinear, QuantizedParams};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Fp32,
    Int8,
}

/// A linear layer `x W + b` in either precision.
#[derive(Clone, Debug)]
pub enum Linear {
    /// `w` is `[in x out]`.
    Fp32 { w: Tensor, b: Option<Tensor> },
    Int8(QuantizedLinear),
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Linear::Fp32 { w, b } => {
                let y = matmul(x, w)?;
                match b {
                    Some(b) => add_bias(&y, b),
                    None => Ok(y),
                }
            }
            Linear::Int8(q) => quantized_matmul(x, q),
        }
    }
}

enum Source<'a> {
    Fp32(&'a ModelParams),
    Int8(&'a ModelParams),
    Quantized(&'a QuantizedParams),
}

impl Source<'_> {
    fn tensor(&self, name: &str) -> Result<Tensor> {
        match self {
            Source::Fp32(p) | Source::Int8(p) => p.get(name).cloned(),
            Source::Quantized(q) => match q.get(name)? {
                QuantEntry::Fp32(t) => Ok(t.clone()),
                QuantEntry::Int8(lin) => Ok(lin.dequantize().transpose()),
            },
        }
    }

    fn linear(&self, w: &str, b: Option<&str>) -> Result<Linear> {
        let bias = b.map(|b| self.tensor(b)).transpose()?;
        match self {
            Source::Fp32(p) => Ok(Linear::Fp32 {
                w: p.get(w)?.clone(),
                b: bias,
            }),
            Source::Int8(p) => Ok(Linear::Int8(quantize_linear(&p.get(w)?.transpose(), bias.as_ref())?)),
            Source::Quantized(q) => match q.get(w)? {
                QuantEntry::Int8(lin) => Ok(Linear::Int8(QuantizedLinear::from_parts(
                    lin.out_dim(),
                    lin.in_dim(),
                    lin.q_weight().to_vec(),
                    lin.scales().to_vec(),
                    bias.map(|b| b.into_data()),
                )?)),
                QuantEntry::Fp32(t) => Ok(Linear::Fp32 {
                    w: t.clone(),
                    b: bias,
                }),
            },
        }
    }

    fn int8(&self) -> bool {
        !matches!(self, Source::Fp32(_))
    }
}

struct Norm {
    gain: Tensor,
    bias: Tensor,
}

impl Norm {
    fn load(src: &Source<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: src.tensor(&format!("{prefix}.gain"))?,
            bias: src.tensor(&format!("{prefix}.bias"))?,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias, LAYER_NORM_EPS as f32)
    }
}

struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl Attention {
    fn load(src: &Source<'_>, prefix: &str) -> Result<Self> {
        let l = |n: &str| src.linear(&format!("{prefix}.{n}"), None);
        Ok(Self {
            wq: l("wq")?,
            wk: l("wk")?,
            wv: l("wv")?,
            wo: l("wo")?,
        })
    }
}

struct Ffn {
    w1: Linear,
    w2: Linear,
}

impl Ffn {
    fn load(src: &Source<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: src.linear(&format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?,
            w2: src.linear(&format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))?,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.w1.forward(x)?.map(|v| v.max(0.0));
        self.w2.forward(&h)
    }
}

struct EncoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ffn_norm: Norm,
    ffn: Ffn,
}

enum SelfBlock {
    Attention(Attention),
    Ssru { wf: Linear, w: Linear },
}

struct DecoderLayer {
    self_norm: Norm,
    self_block: SelfBlock,
    cross_norm: Norm,
    cross: Attention,
    ffn_norm: Norm,
    ffn: Ffn,
}

enum OutputLayer {
    /// Tied embedding, transposed to `[d x V]`, plus the original rows.
    Fp32 { et: Tensor, e: Tensor },
    Int8(QuantizedLinear),
}

/// Encoder states of one source sentence with cross-attention keys and
/// values precomputed for every decoder layer.
#[derive(Debug)]
pub struct EncoderMemory {
    model_id: u64,
    states: Tensor,
    cross_kv: Vec<(Tensor, Tensor)>,
}

impl EncoderMemory {
    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Attention { k: Vec<f32>, v: Vec<f32> },
    Ssru { c: Vec<f32> },
}

/// Per-hypothesis decoder state: KV caches or SSRU cell states.
#[derive(Clone, Debug)]
pub struct DecoderState {
    model_id: u64,
    step: usize,
    memory: Arc<EncoderMemory>,
    caches: Vec<LayerCache>,
}

impl DecoderState {
    /// Index of the next step to run.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn memory(&self) -> &Arc<EncoderMemory> {
        &self.memory
    }

    /// SSRU cell states, one per layer (empty for self-attention decoders).
    pub fn ssru_states(&self) -> Vec<&[f32]> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                LayerCache::Ssru { c } => Some(c.as_slice()),
                LayerCache::Attention { .. } => None,
            })
            .collect()
    }
}

/// Logits of one decode step.
///
/// `surface_logits[i]` scores candidate `i` (or id `i` without a candidate
/// list); `factor_logits` score the factors of the token fed at this step.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetFactorOutput {
    pub surface_logits: Vec<f32>,
    pub factor_logits: Vec<Vec<f32>>,
}

impl TargetFactorOutput {
    /// Surface log-prob of position `surface` plus each factor's log-prob.
    pub fn log_prob(&self, surface: usize, factors: &[usize]) -> f32 {
        let mut s = self.surface_logits.clone();
        log_softmax_in_place(&mut s);
        let mut total = s[surface];
        for (logits, &f) in self.factor_logits.iter().zip(factors) {
            let mut l = logits.clone();
            log_softmax_in_place(&mut l);
            total += l[f];
        }
        total
    }
}

/// Read-only model prepared for decoding; shareable across threads.
pub struct InferenceModel {
    id: u64,
    cfg: ModelConfig,
    precision: Precision,
    src_surface: Tensor,
    src_factors: Vec<Tensor>,
    trg_surface: Tensor,
    trg_factors: Vec<Tensor>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    final_norm: Norm,
    output: OutputLayer,
    output_bias: Vec<f32>,
    factor_out: Vec<Linear>,
    nvs: Option<Linear>,
}

impl InferenceModel {
    pub fn new(cfg: &ModelConfig, params: &ModelParams, precision: Precision) -> Result<Self> {
        params.check_schema(cfg)?;
        match precision {
            Precision::Fp32 => Self::build(cfg, &Source::Fp32(params)),
            Precision::Int8 => Self::build(cfg, &Source::Int8(params)),
        }
    }

    pub fn from_quantized(cfg: &ModelConfig, params: &QuantizedParams) -> Result<Self> {
        params.dequantize()?.check_schema(cfg)?;
        Self::build(cfg, &Source::Quantized(params))
    }

    fn build(cfg: &ModelConfig, src: &Source<'_>) -> Result<Self> {
        cfg.validate()?;
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                Ok(EncoderLayer {
                    attn_norm: Norm::load(src, &format!("{p}.attn_norm"))?,
                    attn: Attention::load(src, &format!("{p}.self_attn"))?,
                    ffn_norm: Norm::load(src, &format!("{p}.ffn_norm"))?,
                    ffn: Ffn::load(src, &format!("{p}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("decoder.layer{l}");
                let self_block = match cfg.decoder_kind {
                    DecoderKind::SelfAttention => {
                        SelfBlock::Attention(Attention::load(src, &format!("{p}.self_attn"))?)
                    }
                    DecoderKind::Ssru => SelfBlock::Ssru {
                        wf: src.linear(&format!("{p}.ssru.wf"), Some(&format!("{p}.ssru.bf")))?,
                        w: src.linear(&format!("{p}.ssru.w"), None)?,
                    },
                };
                Ok(DecoderLayer {
                    self_norm: Norm::load(src, &format!("{p}.self_norm"))?,
                    self_block,
                    cross_norm: Norm::load(src, &format!("{p}.cross_norm"))?,
                    cross: Attention::load(src, &format!("{p}.cross_attn"))?,
                    ffn_norm: Norm::load(src, &format!("{p}.ffn_norm"))?,
                    ffn: Ffn::load(src, &format!("{p}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        let trg_surface = src.tensor("target.embed.surface")?;
        let output = if src.int8() {
            OutputLayer::Int8(quantize_linear(&trg_surface, None)?)
        } else {
            OutputLayer::Fp32 {
                et: trg_surface.transpose(),
                e: trg_surface.clone(),
            }
        };
        Ok(Self {
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            cfg: cfg.clone(),
            precision: if src.int8() {
                Precision::Int8
            } else {
                Precision::Fp32
            },
            src_surface: src.tensor("source.embed.surface")?,
            src_factors: (0..cfg.source_factor_specs.len())
                .map(|i| src.tensor(&format!("source.embed.factor{i}")))
                .collect::<Result<_>>()?,
            trg_surface,
            trg_factors: (0..cfg.target_factor_specs.len())
                .map(|i| src.tensor(&format!("target.embed.factor{i}")))
                .collect::<Result<_>>()?,
            encoder,
            decoder,
            final_norm: Norm::load(src, "decoder.final_norm")?,
            output,
            output_bias: src.tensor("output.bias")?.into_data(),
            factor_out: (0..cfg.target_factor_specs.len())
                .map(|i| {
                    src.linear(
                        &format!("output.factor{i}.weight"),
                        Some(&format!("output.factor{i}.bias")),
                    )
                })
                .collect::<Result<_>>()?,
            nvs: if cfg.nvs_enabled {
                Some(src.linear("nvs.weight", Some("nvs.bias"))?)
            } else {
                None
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn lookup<'a>(table: &'a Tensor, id: u32, what: &str) -> Result<&'a [f32]> {
        if id as usize >= table.rows() {
            return Err(Error::Input(format!(
                "{what} id {id} outside vocabulary of {}",
                table.rows()
            )));
        }
        Ok(table.row(id as usize))
    }

    /// Source embedding: surface and factors combined, plus positions.
    pub fn embed_with_factors(&self, ids: &[u32], factor_ids: &[Vec<u32>]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Input("empty source sentence".into()));
        }
        if factor_ids.len() != self.src_factors.len() {
            return Err(Error::Input(format!(
                "{} source factor streams given, model has {}",
                factor_ids.len(),
                self.src_factors.len()
            )));
        }
        for (i, f) in factor_ids.iter().enumerate() {
            if f.len() != ids.len() {
                return Err(Error::Input(format!(
                    "source factor stream {i} has length {}, surface stream has {}",
                    f.len(),
                    ids.len()
                )));
            }
        }
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (t, &id) in ids.iter().enumerate() {
            let start = data.len();
            data.extend_from_slice(Self::lookup(&self.src_surface, id, "source")?);
            for (i, spec) in self.cfg.source_factor_specs.iter().enumerate() {
                if spec.combine == FactorCombine::Concat {
                    data.extend_from_slice(Self::lookup(&self.src_factors[i], factor_ids[i][t], "source factor")?);
                }
            }
            let row = &mut data[start..];
            for (i, spec) in self.cfg.source_factor_specs.iter().enumerate() {
                if spec.combine == FactorCombine::Sum {
                    let e = Self::lookup(&self.src_factors[i], factor_ids[i][t], "source factor")?;
                    row.iter_mut().zip(e).for_each(|(r, v)| *r += v);
                }
            }
            row.iter_mut().zip(position_row::<f32>(t, d)).for_each(|(r, p)| *r += p);
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Runs the encoder and precomputes cross-attention keys and values.
    pub fn encode(&self, ids: &[u32], factor_ids: &[Vec<u32>]) -> Result<Arc<EncoderMemory>> {
        if ids.len() > self.cfg.max_seq_len {
            return Err(Error::Input(format!(
                "source length {} exceeds max_seq_len {}; chunk the input first",
                ids.len(),
                self.cfg.max_seq_len
            )));
        }
        let mut x = self.embed_with_factors(ids, factor_ids)?;
        let len = ids.len();
        for layer in &self.encoder {
            let h = layer.attn_norm.apply(&x)?;
            let a = self.attend_block(&layer.attn, &h, &h, AttnMask::full(len))?;
            x = crate::kernels::add(&x, &a)?;
            let h = layer.ffn_norm.apply(&x)?;
            x = crate::kernels::add(&x, &layer.ffn.apply(&h)?)?;
        }
        let cross_kv = self
            .decoder
            .iter()
            .map(|l| Ok((l.cross.wk.forward(&x)?, l.cross.wv.forward(&x)?)))
            .collect::<Result<_>>()?;
        Ok(Arc::new(EncoderMemory {
            model_id: self.id,
            states: x,
            cross_kv,
        }))
    }

    fn attend_block(&self, w: &Attention, query: &Tensor, memory: &Tensor, mask: AttnMask) -> Result<Tensor> {
        let q = w.wq.forward(query)?;
        let k = w.wk.forward(memory)?;
        let v = w.wv.forward(memory)?;
        let ctx = attend_rows(&q, k.data(), v.data(), k.rows(), self.cfg.heads, mask);
        w.wo.forward(&ctx)
    }

    pub fn start(&self, memory: Arc<EncoderMemory>) -> Result<DecoderState> {
        if memory.model_id != self.id {
            return Err(Error::State("encoder memory belongs to another model".into()));
        }
        let d = self.cfg.d_model;
        let caches = self
            .decoder
            .iter()
            .map(|l| match l.self_block {
                SelfBlock::Attention(_) => LayerCache::Attention {
                    k: Vec::new(),
                    v: Vec::new(),
                },
                SelfBlock::Ssru { .. } => LayerCache::Ssru { c: vec![0.0; d] },
            })
            .collect();
        Ok(DecoderState {
            model_id: self.id,
            step: 0,
            memory,
            caches,
        })
    }

    /// Runs step `step`, feeding `token` with `factors` (the factors chosen
    /// at the previous step). `candidates` restricts the surface logits.
    pub fn decode_step(
        &self,
        state: &mut DecoderState,
        step: usize,
        token: u32,
        factors: &[u32],
        candidates: Option<&[u32]>,
    ) -> Result<TargetFactorOutput> {
        if state.model_id != self.id {
            return Err(Error::State("decoder state belongs to another model".into()));
        }
        if state.step != step {
            return Err(Error::State(format!(
                "decoder state is at step {}, step {step} requested",
                state.step
            )));
        }
        if factors.len() != self.trg_factors.len() {
            return Err(Error::Input(format!(
                "{} target factors fed, model has {}",
                factors.len(),
                self.trg_factors.len()
            )));
        }
        let d = self.cfg.d_model;
        let mut row: Vec<f32> = Self::lookup(&self.trg_surface, token, "target")?.to_vec();
        for (table, &f) in self.trg_factors.iter().zip(factors) {
            let e = Self::lookup(table, f, "target factor")?;
            row.iter_mut().zip(e).for_each(|(r, v)| *r += v);
        }
        row.iter_mut().zip(position_row::<f32>(step, d)).for_each(|(r, p)| *r += p);
        let mut x = Tensor::new(vec![1, d], row)?;
        let memory = Arc::clone(&state.memory);
        for ((layer, cache), (ck, cv)) in self.decoder.iter().zip(&mut state.caches).zip(&memory.cross_kv) {
            let h = layer.self_norm.apply(&x)?;
            let s = match (&layer.self_block, cache) {
                (SelfBlock::Attention(w), LayerCache::Attention { k, v }) => {
                    let q = w.wq.forward(&h)?;
                    k.extend_from_slice(w.wk.forward(&h)?.data());
                    v.extend_from_slice(w.wv.forward(&h)?.data());
                    let ctx = attend_rows(&q, k, v, step + 1, self.cfg.heads, AttnMask::full(step + 1));
                    w.wo.forward(&ctx)?
                }
                (SelfBlock::Ssru { wf, w }, LayerCache::Ssru { c }) => {
                    let f_pre = wf.forward(&h)?;
                    let u = w.forward(&h)?;
                    let mut out = vec![0.0; d];
                    ssru_update(f_pre.data(), u.data(), c, &mut out);
                    Tensor::new(vec![1, d], out)?
                }
                _ => return Err(Error::State("decoder cache does not match the layer kind".into())),
            };
            x = crate::kernels::add(&x, &s)?;
            let h = layer.cross_norm.apply(&x)?;
            let q = layer.cross.wq.forward(&h)?;
            let ctx = attend_rows(&q, ck.data(), cv.data(), ck.rows(), self.cfg.heads, AttnMask::full(ck.rows()));
            x = crate::kernels::add(&x, &layer.cross.wo.forward(&ctx)?)?;
            let h = layer.ffn_norm.apply(&x)?;
            x = crate::kernels::add(&x, &layer.ffn.apply(&h)?)?;
        }
        let hidden = self.final_norm.apply(&x)?;
        state.step += 1;
        let surface_logits = self.surface_logits(&hidden, candidates)?;
        let factor_logits = self
            .factor_out
            .iter()
            .map(|l| Ok(l.forward(&hidden)?.into_data()))
            .collect::<Result<_>>()?;
        Ok(TargetFactorOutput {
            surface_logits,
            factor_logits,
        })
    }

    fn surface_logits(&self, hidden: &Tensor, candidates: Option<&[u32]>) -> Result<Vec<f32>> {
        let scale: f32 = output_scale(&self.cfg);
        let v = self.cfg.target_vocab_size;
        if let Some(&bad) = candidates.and_then(|c| c.iter().find(|&&id| id as usize >= v)) {
            return Err(Error::Input(format!("candidate id {bad} outside vocabulary of {v}")));
        }
        let raw = match (&self.output, candidates) {
            (OutputLayer::Fp32 { et, .. }, None) => matmul(hidden, et)?.into_data(),
            (OutputLayer::Fp32 { e, .. }, Some(ids)) => {
                ids.iter().map(|&id| dot(hidden.data(), e.row(id as usize))).collect()
            }
            (OutputLayer::Int8(q), None) => quantized_matmul(hidden, q)?.into_data(),
            (OutputLayer::Int8(q), Some(ids)) => q.forward_rows(hidden, ids)?.into_data(),
        };
        Ok(match candidates {
            None => raw
                .iter()
                .zip(&self.output_bias)
                .map(|(&r, &b)| r * scale + b)
                .collect(),
            Some(ids) => raw
                .iter()
                .zip(ids)
                .map(|(&r, &id)| r * scale + self.output_bias[id as usize])
                .collect(),
        })
    }

    /// NVS: `{i : sigmoid(z_i) > threshold} ∪ always_include`, sorted.
    pub fn nvs_select(&self, memory: &EncoderMemory, threshold: f32, always_include: &[u32]) -> Result<Vec<u32>> {
        let head = self
            .nvs
            .as_ref()
            .ok_or_else(|| Error::Capability("model was built without neural vocabulary selection".into()))?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Input(format!("NVS threshold {threshold} outside [0, 1]")));
        }
        let states = memory.states();
        let d = states.cols();
        let mut pooled = states.row(0).to_vec();
        for r in 1..states.rows() {
            pooled.iter_mut().zip(states.row(r)).for_each(|(p, &v)| *p = p.max(v));
        }
        let logits = head.forward(&Tensor::new(vec![1, d], pooled)?)?;
        // sigmoid(z) > t  <=>  z > ln(t / (1 - t)); exact at both ends
        let cut = if threshold == 0.0 {
            f32::NEG_INFINITY
        } else if threshold == 1.0 {
            f32::INFINITY
        } else {
            (threshold as f64 / (1.0 - threshold as f64)).ln() as f32
        };
        let mut out: Vec<u32> = logits
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &z)| z > cut)
            .map(|(i, _)| i as u32)
            .chain(always_include.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

fn attend_rows(q: &Tensor, k: &[f32], v: &[f32], lk: usize, heads: usize, mask: AttnMask) -> Tensor {
    let (lq, d) = (q.rows(), q.cols());
    let mut out = vec![0.0; lq * d];
    let mut probs = vec![0.0; heads * lq * lk];
    attend(q.data(), k, v, lq, lk, d, heads, mask, &mut out, &mut probs);
    Tensor::new(vec![lq, d], out).expect("attention output is non-empty")
}
