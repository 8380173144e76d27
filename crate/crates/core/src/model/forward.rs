//! Batched teacher-forced forward pass recorded on a [`Tape`].

use std::collections::BTreeMap;

use super::config::{DecoderKind, FactorCombine, ModelConfig};
use super::params::ModelParams;
use super::{BOS, EOS, NUM_SPECIALS, PAD};
use crate::error::{Error, Result};
use crate::kernels::{position_row, AttnLayout, AttnMask, Scalar, SeqLayout, Tape, Tensor, Var, LAYER_NORM_EPS};

/// One id-encoded training pair.
///
/// `trg_factors[i]` is already time-shifted: `[SHIFT, f(y1), .., f(yn)]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub src_factors: Vec<Vec<u32>>,
    pub trg: Vec<u32>,
    pub trg_factors: Vec<Vec<u32>>,
}

/// Right-padded, flattened batch of [`Example`]s.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src_lengths: Vec<usize>,
    pub src_ids: Vec<u32>,
    pub src_factor_ids: Vec<Vec<u32>>,
    /// Decoder steps: longest target plus one.
    pub trg_len: usize,
    pub trg_lengths: Vec<usize>,
    pub dec_input: Vec<u32>,
    pub dec_factor_input: Vec<Vec<u32>>,
    pub labels: Vec<u32>,
    pub factor_labels: Vec<Vec<u32>>,
    /// Bag of target words per sentence, specials excluded.
    pub nvs_targets: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(examples: &[Example]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let nsf = first.src_factors.len();
        let ntf = first.trg_factors.len();
        for (i, ex) in examples.iter().enumerate() {
            if ex.src.is_empty() {
                return Err(Error::Input(format!("example {i} has an empty source")));
            }
            if ex.src_factors.len() != nsf || ex.trg_factors.len() != ntf {
                return Err(Error::Input(format!("example {i} has a different factor count")));
            }
            if let Some(f) = ex.src_factors.iter().position(|f| f.len() != ex.src.len()) {
                return Err(Error::Input(format!(
                    "example {i}: source factor {f} has length {}, source has {}",
                    ex.src_factors[f].len(),
                    ex.src.len()
                )));
            }
            if let Some(f) = ex.trg_factors.iter().position(|f| f.len() != ex.trg.len() + 1) {
                return Err(Error::Input(format!(
                    "example {i}: target factor {f} has length {}, expected {}",
                    ex.trg_factors[f].len(),
                    ex.trg.len() + 1
                )));
            }
        }
        let size = examples.len();
        let src_len = examples.iter().map(|e| e.src.len()).max().unwrap();
        let trg_len = examples.iter().map(|e| e.trg.len()).max().unwrap() + 1;
        let pad_to = |s: &[u32], len: usize, out: &mut Vec<u32>| {
            out.extend_from_slice(s);
            out.extend(std::iter::repeat(PAD).take(len - s.len()));
        };
        let mut b = Batch {
            size,
            src_len,
            src_lengths: Vec::with_capacity(size),
            src_ids: Vec::with_capacity(size * src_len),
            src_factor_ids: vec![Vec::with_capacity(size * src_len); nsf],
            trg_len,
            trg_lengths: Vec::with_capacity(size),
            dec_input: Vec::with_capacity(size * trg_len),
            dec_factor_input: vec![Vec::with_capacity(size * trg_len); ntf],
            labels: Vec::with_capacity(size * trg_len),
            factor_labels: vec![Vec::with_capacity(size * trg_len); ntf],
            nvs_targets: Vec::with_capacity(size),
        };
        for ex in examples {
            let n = ex.trg.len();
            b.src_lengths.push(ex.src.len());
            b.trg_lengths.push(n + 1);
            pad_to(&ex.src, src_len, &mut b.src_ids);
            for (f, out) in ex.src_factors.iter().zip(&mut b.src_factor_ids) {
                pad_to(f, src_len, out);
            }
            let mut input = vec![BOS];
            input.extend_from_slice(&ex.trg);
            pad_to(&input, trg_len, &mut b.dec_input);
            let mut labels = ex.trg.clone();
            labels.push(EOS);
            pad_to(&labels, trg_len, &mut b.labels);
            for (f, tf) in ex.trg_factors.iter().enumerate() {
                let mut fin = vec![BOS];
                fin.extend_from_slice(&tf[..n]);
                pad_to(&fin, trg_len, &mut b.dec_factor_input[f]);
                pad_to(tf, trg_len, &mut b.factor_labels[f]);
            }
            let mut bag: Vec<u32> = ex.trg.iter().copied().filter(|&t| t >= NUM_SPECIALS).collect();
            bag.sort_unstable();
            bag.dedup();
            b.nvs_targets.push(bag);
        }
        Ok(b)
    }

    /// Non-padding decoder positions.
    pub fn num_target_tokens(&self) -> usize {
        self.trg_lengths.iter().sum()
    }
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Records every parameter as a leaf; frozen ones are not trainable.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.cast(), !params.is_frozen(name));
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    /// Records every parameter as a constant.
    pub fn bind_constant<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.constant(t.cast())))
            .collect();
        Self { vars }
    }

    pub fn insert(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Tape outputs of a forward pass; logits are `[batch * trg_len, vocab]`.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub encoder_out: Var,
    pub logits: Var,
    pub factor_logits: Vec<Var>,
    /// `[batch, target vocab]` when NVS is enabled.
    pub nvs_logits: Option<Var>,
}

fn positions<T: Scalar>(batch: usize, len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        for p in 0..len {
            data.extend(position_row::<T>(p, d));
        }
    }
    Tensor::new(vec![batch * len, d], data).expect("positions are non-empty")
}

/// Source embeddings: surface and factor tables combined, plus positions.
pub fn embed_source<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    ids: &[u32],
    factor_ids: &[Vec<u32>],
    batch: usize,
) -> Result<Var> {
    if factor_ids.len() != cfg.source_factor_specs.len() {
        return Err(Error::Input(format!(
            "{} source factor streams given, config has {}",
            factor_ids.len(),
            cfg.source_factor_specs.len()
        )));
    }
    for (i, f) in factor_ids.iter().enumerate() {
        if f.len() != ids.len() {
            return Err(Error::Input(format!(
                "source factor {i} has length {}, surface stream has {}",
                f.len(),
                ids.len()
            )));
        }
    }
    let mut x = tape.gather(vars.get("source.embed.surface")?, ids)?;
    let mut concat = vec![x];
    let mut summed = Vec::new();
    for (i, (spec, fids)) in cfg.source_factor_specs.iter().zip(factor_ids).enumerate() {
        let e = tape.gather(vars.get(&format!("source.embed.factor{i}"))?, fids)?;
        match spec.combine {
            FactorCombine::Sum => summed.push(e),
            FactorCombine::Concat => concat.push(e),
        }
    }
    if concat.len() > 1 {
        x = tape.concat_cols(&concat)?;
    }
    for e in summed {
        x = tape.add(x, e)?;
    }
    let len = ids.len() / batch;
    let pos = tape.constant(positions(batch, len, cfg.d_model));
    tape.add(x, pos)
}

/// Target embeddings: surface plus every factor, plus positions.
pub fn embed_target<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    ids: &[u32],
    factor_ids: &[Vec<u32>],
    batch: usize,
) -> Result<Var> {
    if factor_ids.len() != cfg.target_factor_specs.len() {
        return Err(Error::Input(format!(
            "{} target factor streams given, config has {}",
            factor_ids.len(),
            cfg.target_factor_specs.len()
        )));
    }
    let mut x = tape.gather(vars.get("target.embed.surface")?, ids)?;
    for (i, fids) in factor_ids.iter().enumerate() {
        let e = tape.gather(vars.get(&format!("target.embed.factor{i}"))?, fids)?;
        x = tape.add(x, e)?;
    }
    let len = ids.len() / batch;
    let pos = tape.constant(positions(batch, len, cfg.d_model));
    tape.add(x, pos)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let g = vars.get(&format!("{prefix}.gain"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, T::lit(LAYER_NORM_EPS))
}

fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    query: Var,
    memory: Var,
    layout: AttnLayout,
) -> Result<Var> {
    let q = tape.matmul(query, vars.get(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(memory, vars.get(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(memory, vars.get(&format!("{prefix}.wv"))?)?;
    let ctx = tape.attention(q, k, v, layout)?;
    tape.matmul(ctx, vars.get(&format!("{prefix}.wo"))?)
}

fn ffn_block<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.linear(
        x,
        vars.get(&format!("{prefix}.w1"))?,
        Some(vars.get(&format!("{prefix}.b1"))?),
    )?;
    let h = tape.relu(h);
    tape.linear(
        h,
        vars.get(&format!("{prefix}.w2"))?,
        Some(vars.get(&format!("{prefix}.b2"))?),
    )
}

/// SSRU over `batch` sequences of `len` rows:
/// `f = sigmoid(x W_f + b_f)`, `c_t = f * c_{t-1} + (1 - f) * (x W)`, `h = relu(c)`.
pub fn ssru_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let f = tape.linear(
        x,
        vars.get(&format!("{prefix}.wf"))?,
        Some(vars.get(&format!("{prefix}.bf"))?),
    )?;
    let f = tape.sigmoid(f);
    let u = tape.matmul(x, vars.get(&format!("{prefix}.w"))?)?;
    let c = tape.gated_scan(f, u, batch, len)?;
    Ok(tape.relu(c))
}

/// Pre-norm transformer encoder over `batch` padded sequences.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    embedded: Var,
    lengths: &[usize],
) -> Result<Var> {
    let batch = lengths.len();
    let len = tape.value(embedded).rows() / batch.max(1);
    if len > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "source length {len} exceeds max_seq_len {}; chunk the input first",
            cfg.max_seq_len
        )));
    }
    let layout = AttnLayout {
        batch,
        lq: len,
        lk: len,
        heads: cfg.heads,
        masks: lengths.iter().map(|&l| AttnMask::full(l)).collect(),
    };
    let mut x = embedded;
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.layer{l}");
        let h = norm(tape, vars, &format!("{p}.attn_norm"), x)?;
        let a = attention_block(tape, vars, &format!("{p}.self_attn"), h, h, layout.clone())?;
        x = tape.add(x, a)?;
        let h = norm(tape, vars, &format!("{p}.ffn_norm"), x)?;
        let f = ffn_block(tape, vars, &format!("{p}.ffn"), h)?;
        x = tape.add(x, f)?;
    }
    Ok(x)
}

/// Teacher-forced decoder; returns the final normalized hidden states.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    embedded: Var,
    trg_lengths: &[usize],
    memory: Var,
    src_lengths: &[usize],
) -> Result<Var> {
    let batch = trg_lengths.len();
    let len = tape.value(embedded).rows() / batch;
    let src_len = tape.value(memory).rows() / batch;
    let self_layout = AttnLayout {
        batch,
        lq: len,
        lk: len,
        heads: cfg.heads,
        masks: trg_lengths.iter().map(|&l| AttnMask::causal(l)).collect(),
    };
    let cross_layout = AttnLayout {
        batch,
        lq: len,
        lk: src_len,
        heads: cfg.heads,
        masks: src_lengths.iter().map(|&l| AttnMask::full(l)).collect(),
    };
    let mut x = embedded;
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.layer{l}");
        let h = norm(tape, vars, &format!("{p}.self_norm"), x)?;
        let s = match cfg.decoder_kind {
            DecoderKind::SelfAttention => {
                attention_block(tape, vars, &format!("{p}.self_attn"), h, h, self_layout.clone())?
            }
            DecoderKind::Ssru => ssru_tape(tape, vars, &format!("{p}.ssru"), h, batch, len)?,
        };
        x = tape.add(x, s)?;
        let h = norm(tape, vars, &format!("{p}.cross_norm"), x)?;
        let c = attention_block(
            tape,
            vars,
            &format!("{p}.cross_attn"),
            h,
            memory,
            cross_layout.clone(),
        )?;
        x = tape.add(x, c)?;
        let h = norm(tape, vars, &format!("{p}.ffn_norm"), x)?;
        let f = ffn_block(tape, vars, &format!("{p}.ffn"), h)?;
        x = tape.add(x, f)?;
    }
    norm(tape, vars, "decoder.final_norm", x)
}

/// Tied surface output layer: `h E^T / sqrt(d) + b`.
pub fn surface_logits<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    hidden: Var,
) -> Result<Var> {
    let raw = tape.matmul_nt(hidden, vars.get("target.embed.surface")?)?;
    let scaled = tape.scale(raw, output_scale(cfg));
    tape.add_bias(scaled, vars.get("output.bias")?)
}

pub(crate) fn output_scale<T: Scalar>(cfg: &ModelConfig) -> T {
    T::one() / T::lit(cfg.d_model as f64).sqrt()
}

/// NVS head: max-pool the encoder states, then one linear layer.
pub fn nvs_logits<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    encoder_out: Var,
    lengths: &[usize],
) -> Result<Var> {
    let batch = lengths.len();
    let layout = SeqLayout {
        batch,
        len: tape.value(encoder_out).rows() / batch,
        lengths: lengths.to_vec(),
    };
    let pooled = tape.max_pool(encoder_out, &layout)?;
    tape.linear(pooled, vars.get("nvs.weight")?, Some(vars.get("nvs.bias")?))
}

/// Full teacher-forced forward pass.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    batch: &Batch,
) -> Result<ForwardOutput> {
    let src = embed_source(tape, cfg, vars, &batch.src_ids, &batch.src_factor_ids, batch.size)?;
    let encoder_out = encode(tape, cfg, vars, src, &batch.src_lengths)?;
    let trg = embed_target(
        tape,
        cfg,
        vars,
        &batch.dec_input,
        &batch.dec_factor_input,
        batch.size,
    )?;
    let hidden = decode(
        tape,
        cfg,
        vars,
        trg,
        &batch.trg_lengths,
        encoder_out,
        &batch.src_lengths,
    )?;
    let logits = surface_logits(tape, cfg, vars, hidden)?;
    let factor_logits = (0..cfg.target_factor_specs.len())
        .map(|i| {
            tape.linear(
                hidden,
                vars.get(&format!("output.factor{i}.weight"))?,
                Some(vars.get(&format!("output.factor{i}.bias"))?),
            )
        })
        .collect::<Result<_>>()?;
    let nvs_logits = if cfg.nvs_enabled {
        Some(nvs_logits(tape, vars, encoder_out, &batch.src_lengths)?)
    } else {
        None
    };
    Ok(ForwardOutput {
        encoder_out,
        logits,
        factor_logits,
        nvs_logits,
    })
}
