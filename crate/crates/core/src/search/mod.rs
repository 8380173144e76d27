//! Greedy and beam search, prefix forcing, vocabulary restriction, input
//! chunking and the sentence-level translation pipeline.

mod decode;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use decode::{
    beam_search, greedy_search, max_output_len, Hypothesis, Prefix, SearchOptions, StepModel,
};
pub use crate::shortlist::Shortlist;

use crate::dataprep::{Vocabularies, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::model::{InferenceModel, EOS, PAD, UNK};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InputOptions {
    pub prefix_all_chunks: bool,
    pub strip_prefix: bool,
}

/// One sentence to translate, as tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SentenceInput {
    pub tokens: Vec<String>,
    pub source_factors: Vec<Vec<String>>,
    pub source_prefix: Vec<String>,
    pub target_prefix: Vec<String>,
    pub target_prefix_factors: Vec<Vec<String>>,
    pub options: InputOptions,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonInput {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_factors: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_prefix_factors: Option<Vec<String>>,
}

fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn join(t: &[String]) -> String {
    t.join(" ")
}

impl SentenceInput {
    pub fn from_text(line: &str) -> Self {
        Self {
            tokens: split(line),
            ..Self::default()
        }
    }

    /// Parses one JSON object with keys `text`, `source_factors`,
    /// `source_prefix`, `target_prefix` and `target_prefix_factors`.
    pub fn from_json(line: &str) -> Result<Self> {
        let j: JsonInput = serde_json::from_str(line)?;
        let input = Self {
            tokens: split(&j.text),
            source_factors: j.source_factors.iter().flatten().map(|s| split(s)).collect(),
            source_prefix: j.source_prefix.as_deref().map(split).unwrap_or_default(),
            target_prefix: j.target_prefix.as_deref().map(split).unwrap_or_default(),
            target_prefix_factors: j.target_prefix_factors.iter().flatten().map(|s| split(s)).collect(),
            options: InputOptions::default(),
        };
        input.validate()?;
        Ok(input)
    }

    pub fn to_json(&self) -> String {
        let opt = |v: &[String]| (!v.is_empty()).then(|| join(v));
        let streams = |v: &[Vec<String>]| (!v.is_empty()).then(|| v.iter().map(|s| join(s)).collect());
        let j = JsonInput {
            text: join(&self.tokens),
            source_factors: streams(&self.source_factors),
            source_prefix: opt(&self.source_prefix),
            target_prefix: opt(&self.target_prefix),
            target_prefix_factors: streams(&self.target_prefix_factors),
        };
        serde_json::to_string(&j).expect("plain strings serialize")
    }

    /// Source factor streams must match the tokens in length.
    pub fn validate(&self) -> Result<()> {
        if let Some((i, f)) = self
            .source_factors
            .iter()
            .enumerate()
            .find(|(_, f)| f.len() != self.tokens.len())
        {
            return Err(Error::Input(format!(
                "source factor stream {i} has {} tokens, text has {}",
                f.len(),
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

/// Splits the source into pieces of at most `max_seq_len` tokens including
/// the source prefix, which starts every piece.
pub fn chunk_input(input: &SentenceInput, max_seq_len: usize) -> Result<Vec<SentenceInput>> {
    if input.tokens.is_empty() {
        return Err(Error::Input("empty input".into()));
    }
    input.validate()?;
    let np = input.source_prefix.len();
    if max_seq_len <= np {
        return Err(Error::Input(format!(
            "source prefix of {np} tokens leaves no room under a length limit of {max_seq_len}"
        )));
    }
    let piece = max_seq_len - np;
    let pad = vec![PAD_TOKEN.to_string(); np];
    Ok(input
        .tokens
        .chunks(piece)
        .enumerate()
        .map(|(c, toks)| {
            let range = c * piece..c * piece + toks.len();
            let with_target = c == 0 || input.options.prefix_all_chunks;
            SentenceInput {
                tokens: input.source_prefix.iter().chain(toks).cloned().collect(),
                source_factors: input
                    .source_factors
                    .iter()
                    .map(|f| pad.iter().chain(&f[range.clone()]).cloned().collect())
                    .collect(),
                source_prefix: Vec::new(),
                target_prefix: if with_target { input.target_prefix.clone() } else { Vec::new() },
                target_prefix_factors: if with_target {
                    input.target_prefix_factors.clone()
                } else {
                    Vec::new()
                },
                options: input.options,
            }
        })
        .collect())
}

/// How the output vocabulary is restricted.
#[derive(Clone, Copy, Debug, Default)]
pub enum Restriction<'a> {
    #[default]
    Full,
    Shortlist(&'a Shortlist),
    /// Neural vocabulary selection at this threshold.
    Nvs(f32),
}

#[derive(Clone, Debug)]
pub struct TranslateSettings<'a> {
    pub beam: usize,
    /// Use the dedicated greedy search; `beam` is ignored.
    pub greedy: bool,
    pub length_alpha: f32,
    pub restriction: Restriction<'a>,
    pub min_len: usize,
    /// Overrides `2 * source length + 10`.
    pub max_len: Option<usize>,
}

impl Default for TranslateSettings<'_> {
    fn default() -> Self {
        Self {
            beam: 5,
            greedy: false,
            length_alpha: 1.0,
            restriction: Restriction::Full,
            min_len: 0,
            max_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Translation {
    pub text: String,
    pub tokens: Vec<String>,
    /// One space-joined string per target factor stream.
    pub factors: Vec<String>,
    /// Mean of the per-chunk scores.
    pub score: f32,
    pub chunks: usize,
    pub forced_eos: bool,
}

struct ChunkOutput {
    tokens: Vec<String>,
    factors: Vec<Vec<String>>,
    score: f32,
    forced_eos: bool,
}

fn encode_prefix(vocab: &crate::dataprep::Vocabulary, tokens: &[String], what: &str) -> Vec<u32> {
    tokens
        .iter()
        .map(|t| {
            vocab.id(t).unwrap_or_else(|| {
                log::warn!("{what} token {t:?} is not in the vocabulary; using UNK");
                UNK
            })
        })
        .collect()
}

fn translate_chunk(
    model: &InferenceModel,
    vocabs: &Vocabularies,
    chunk: &SentenceInput,
    settings: &TranslateSettings,
) -> Result<ChunkOutput> {
    let cfg = model.config();
    if chunk.source_factors.len() != vocabs.source_factors.len() {
        return Err(Error::Input(format!(
            "model expects {} source factor streams, input has {}",
            vocabs.source_factors.len(),
            chunk.source_factors.len()
        )));
    }
    if chunk.target_prefix_factors.len() > vocabs.target_factors.len() {
        return Err(Error::Input(format!(
            "model has {} target factor streams, prefix gives {}",
            vocabs.target_factors.len(),
            chunk.target_prefix_factors.len()
        )));
    }
    let src = vocabs.source.encode_all(&chunk.tokens);
    let src_factors: Vec<Vec<u32>> = vocabs
        .source_factors
        .iter()
        .zip(&chunk.source_factors)
        .map(|(v, f)| v.encode_all(f))
        .collect();
    let prefix = Prefix {
        tokens: encode_prefix(&vocabs.target, &chunk.target_prefix, "target prefix"),
        factors: vocabs
            .target_factors
            .iter()
            .zip(&chunk.target_prefix_factors)
            .map(|(v, f)| encode_prefix(v, f, "target prefix factor"))
            .collect(),
    };
    let memory = model.encode(&src, &src_factors)?;
    let mut always = vec![PAD, UNK, EOS];
    always.extend(&prefix.tokens);
    let candidates = match settings.restriction {
        Restriction::Full => None,
        Restriction::Shortlist(sl) => {
            let mut c = sl.candidates(&src);
            c.extend(&always);
            c.retain(|&id| (id as usize) < cfg.target_vocab_size);
            c.sort_unstable();
            c.dedup();
            Some(c)
        }
        Restriction::Nvs(threshold) => Some(model.nvs_select(&memory, threshold, &always)?),
    };
    let opts = SearchOptions {
        beam: settings.beam,
        length_alpha: settings.length_alpha,
        max_len: settings.max_len.unwrap_or_else(|| max_output_len(src.len())),
        min_len: settings.min_len,
    };
    let state = model.start(memory)?;
    let hyp = if settings.greedy {
        greedy_search(model, state, candidates.as_deref(), &prefix, &opts)?
    } else {
        beam_search(model, state, candidates.as_deref(), &prefix, &opts)?
    };
    let skip = if chunk.options.strip_prefix { prefix.tokens.len() } else { 0 };
    let out = hyp.output();
    Ok(ChunkOutput {
        tokens: out[skip.min(out.len())..]
            .iter()
            .map(|&t| vocabs.target.token(t).to_string())
            .collect(),
        factors: vocabs
            .target_factors
            .iter()
            .zip(&hyp.factors)
            .map(|(v, f)| f[skip.min(f.len())..].iter().map(|&t| v.token(t).to_string()).collect())
            .collect(),
        score: hyp.score,
        forced_eos: hyp.forced_eos,
    })
}

/// Chunks, translates each chunk and joins the outputs.
pub fn translate_sentence(
    model: &InferenceModel,
    vocabs: &Vocabularies,
    input: &SentenceInput,
    settings: &TranslateSettings,
) -> Result<Translation> {
    let chunks = chunk_input(input, model.config().max_seq_len)?;
    let outs = chunks
        .iter()
        .map(|c| translate_chunk(model, vocabs, c, settings))
        .collect::<Result<Vec<_>>>()?;
    let tokens: Vec<String> = outs.iter().flat_map(|o| o.tokens.iter().cloned()).collect();
    let factors = (0..vocabs.target_factors.len())
        .map(|i| {
            outs.iter()
                .flat_map(|o| o.factors[i].iter().map(String::as_str))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    Ok(Translation {
        text: tokens.join(" "),
        tokens,
        factors,
        score: outs.iter().map(|o| o.score).sum::<f32>() / outs.len() as f32,
        chunks: outs.len(),
        forced_eos: outs.iter().any(|o| o.forced_eos),
    })
}

/// Translates every input in parallel; results keep input order and a bad
/// input only fails its own record.
pub fn translate(
    model: &InferenceModel,
    vocabs: &Vocabularies,
    inputs: &[SentenceInput],
    settings: &TranslateSettings,
) -> Vec<Result<Translation>> {
    inputs
        .par_iter()
        .map(|i| translate_sentence(model, vocabs, i, settings))
        .collect()
}
