use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nmt_core::dataprep::{prepare_shards, PrepareConfig, ShardSet, Vocabularies, Vocabulary};
use nmt_core::model::{
    decoder_step_cost, DecoderKind, Example, FactorCombine, InferenceModel, ModelConfig, ModelParams, Precision,
    SourceFactorSpec, SHIFT,
};
use nmt_core::quant::QuantizedParams;
use nmt_core::search::{translate, translate_sentence, Restriction, SentenceInput, TranslateSettings, Translation};
use nmt_core::shortlist::{extract_shortlist, train_model1, Shortlist};
use nmt_core::trainer::{train, FreezeSpec, TrainConfig, TrainStart, TrainedModel, CONFIG_FILE, METRICS_FILE};
use nmt_core::{Error, Result};

use crate::args::*;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn tokens(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

pub fn prepare_data(a: &PrepareArgs) -> Result<()> {
    let mut cfg = PrepareConfig::new(a.source.clone(), a.target.clone(), a.output.clone());
    cfg.source_factors = a.source_factors.clone();
    cfg.target_factors = a.target_factors.clone();
    cfg.num_shards = a.num_shards;
    cfg.seed = a.seed;
    cfg.max_len = a.max_len;
    cfg.min_count = a.min_count;
    cfg.max_vocab = a.max_vocab;
    let set = prepare_shards(&cfg)?;
    log::info!(
        "wrote {} sentences into {} shards ({} filtered)",
        set.manifest.sentences,
        set.manifest.num_shards,
        set.manifest.filtered
    );
    Ok(())
}

/// Encodes a parallel text set with the training vocabularies. Pairs with an
/// empty side or a side longer than `max_len` are skipped.
fn read_examples(
    vocabs: &Vocabularies,
    source: &Path,
    target: &Path,
    source_factors: &[PathBuf],
    target_factors: &[PathBuf],
    max_len: usize,
) -> Result<Vec<Example>> {
    if source_factors.len() != vocabs.source_factors.len() || target_factors.len() != vocabs.target_factors.len() {
        return Err(Error::Config(format!(
            "validation data needs {} source and {} target factor files",
            vocabs.source_factors.len(),
            vocabs.target_factors.len()
        )));
    }
    let src = read_lines(source)?;
    let trg = read_lines(target)?;
    let aligned = |name: &Path, lines: Vec<String>| -> Result<Vec<String>> {
        if lines.len() != src.len() {
            return Err(Error::Alignment {
                left_name: source.display().to_string(),
                left: src.len(),
                right_name: name.display().to_string(),
                right: lines.len(),
            });
        }
        Ok(lines)
    };
    let trg = aligned(target, trg)?;
    let sf = source_factors
        .iter()
        .map(|p| aligned(p, read_lines(p)?))
        .collect::<Result<Vec<_>>>()?;
    let tf = target_factors
        .iter()
        .map(|p| aligned(p, read_lines(p)?))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    let mut skipped = 0;
    for i in 0..src.len() {
        let (s, t) = (tokens(&src[i]), tokens(&trg[i]));
        if s.is_empty() || t.is_empty() || s.len() > max_len || t.len() > max_len {
            skipped += 1;
            continue;
        }
        let stream = |lines: &[String], v: &Vocabulary, want: usize| -> Result<Vec<u32>> {
            let f = tokens(&lines[i]);
            if f.len() != want {
                return Err(Error::Line {
                    line: i + 1,
                    message: format!("factor line has {} tokens, surface has {want}", f.len()),
                });
            }
            Ok(v.encode_all(&f))
        };
        let src_factors = sf
            .iter()
            .zip(&vocabs.source_factors)
            .map(|(l, v)| stream(l, v, s.len()))
            .collect::<Result<Vec<_>>>()?;
        let trg_factors = tf
            .iter()
            .zip(&vocabs.target_factors)
            .map(|(l, v)| Ok(std::iter::once(SHIFT).chain(stream(l, v, t.len())?).collect()))
            .collect::<Result<Vec<_>>>()?;
        out.push(Example {
            src: vocabs.source.encode_all(&s),
            src_factors,
            trg: vocabs.target.encode_all(&t),
            trg_factors,
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} validation pairs that are empty or longer than {max_len} tokens");
    }
    Ok(out)
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    ModelConfig::from_text(&text)
}

fn resolve_config(a: &TrainArgs, vocabs: &Vocabularies) -> Result<ModelConfig> {
    let base = if a.resume {
        Some(a.output.join(CONFIG_FILE))
    } else {
        a.params
            .as_ref()
            .and_then(|p| p.parent())
            .map(|d| d.join(CONFIG_FILE))
            .filter(|p| p.exists())
    };
    let mut cfg = match base {
        Some(p) => read_config(&p)?,
        None => ModelConfig::default(),
    };
    let arch = &a.arch;
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.d_model, arch.d_model);
    set(&mut cfg.heads, arch.heads);
    set(&mut cfg.ff_dim, arch.ff_dim);
    set(&mut cfg.encoder_layers, arch.encoder_layers);
    set(&mut cfg.decoder_layers, arch.decoder_layers);
    set(&mut cfg.max_seq_len, arch.max_seq_len);
    match arch.decoder {
        Some(DecoderArg::Ssru) => cfg.decoder_kind = DecoderKind::Ssru,
        Some(DecoderArg::SelfAttention) => cfg.decoder_kind = DecoderKind::SelfAttention,
        None => {}
    }
    cfg.nvs_enabled |= arch.nvs;
    cfg.source_vocab_size = vocabs.source.len();
    cfg.target_vocab_size = vocabs.target.len();
    cfg.target_factor_specs = vocabs.target_factors.iter().map(Vocabulary::len).collect();

    let n = vocabs.source_factors.len();
    if !arch.source_factor_dims.is_empty() && arch.source_factor_dims.len() != n {
        return Err(Error::Config(format!(
            "{} source factor dimensions given for {n} source factors",
            arch.source_factor_dims.len()
        )));
    }
    let combine = match arch.source_factor_combine {
        CombineArg::Sum => FactorCombine::Sum,
        CombineArg::Concat => FactorCombine::Concat,
    };
    let keep = cfg.source_factor_specs.len() == n && arch.source_factor_dims.is_empty();
    if !keep {
        cfg.source_factor_specs = vocabs
            .source_factors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let embed_dim = match (arch.source_factor_dims.get(i), combine) {
                    (Some(&d), _) => d,
                    (None, FactorCombine::Sum) => cfg.d_model,
                    (None, FactorCombine::Concat) => (cfg.d_model / 8).max(1),
                };
                SourceFactorSpec {
                    vocab_size: v.len(),
                    embed_dim,
                    combine,
                }
            })
            .collect();
    }
    for (spec, v) in cfg.source_factor_specs.iter_mut().zip(&vocabs.source_factors) {
        spec.vocab_size = v.len();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Returns true when only the config was requested.
pub fn train_model(a: &TrainArgs, out: &mut impl Write) -> Result<bool> {
    let set = ShardSet::open(&a.prepared_data)?;
    let vocabs = set.vocabularies()?;
    let cfg = resolve_config(a, &vocabs)?;
    if a.show_config {
        write_out(out, cfg.to_text().as_bytes())?;
        return Ok(true);
    }
    if !a.resume && a.output.join(METRICS_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds a training run; pass --resume to continue it",
            a.output.display()
        )));
    }
    let tcfg = TrainConfig {
        max_updates: a.max_updates,
        checkpoint_interval: a.checkpoint_interval.min(a.max_updates.max(1)),
        learning_rate: a.learning_rate,
        warmup: a.warmup,
        label_smoothing: a.label_smoothing,
        freeze: a.freeze.as_deref().map(FreezeSpec::parse).transpose()?,
        factor_loss_weights: a.factor_loss_weights.clone(),
        nvs_loss_weight: a.nvs_loss_weight,
        average_best: a.average_best,
        batch_tokens: a.batch_tokens,
        seed: a.seed,
    };
    let validation = read_examples(
        &vocabs,
        &a.validation_source,
        &a.validation_target,
        &a.validation_source_factors,
        &a.validation_target_factors,
        set.manifest.max_len.min(cfg.max_seq_len),
    )?;
    let start = if a.resume {
        TrainStart::Resume
    } else if let Some(p) = &a.params {
        TrainStart::Params(ModelParams::load(p)?)
    } else {
        TrainStart::Fresh
    };
    let summary = train(&cfg, &set, &validation, &tcfg, &a.output, start)?;
    if let Some(best) = nmt_core::trainer::select_best(&summary.checkpoints, 1).first() {
        log::info!(
            "best checkpoint: update {} with validation loss {:.5}",
            best.update,
            best.validation_loss
        );
    }
    Ok(false)
}

fn write_out(out: &mut impl Write, bytes: &[u8]) -> Result<()> {
    out.write_all(bytes).map_err(|e| Error::io("stdout", e))
}

pub struct LoadedModel {
    pub trained: TrainedModel,
    pub model: InferenceModel,
}

pub fn load_model(a: &DecodeArgs) -> Result<LoadedModel> {
    let trained = TrainedModel::open(&a.model)?;
    let path = trained.params_path(Some(&a.params));
    let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let model = if QuantizedParams::sniff(&bytes) {
        InferenceModel::from_quantized(&trained.config, &QuantizedParams::from_bytes(&bytes)?)?
    } else {
        let params = ModelParams::read_from(&mut bytes.as_slice())?;
        let precision = match a.quantize {
            Some(QuantizeMode::Int8) => Precision::Int8,
            None => Precision::Fp32,
        };
        InferenceModel::new(&trained.config, &params, precision)?
    };
    Ok(LoadedModel { trained, model })
}

fn settings<'a>(a: &DecodeArgs, shortlist: Option<&'a Shortlist>) -> TranslateSettings<'a> {
    let restriction = match (shortlist, a.nvs_threshold) {
        (Some(s), _) => Restriction::Shortlist(s),
        (None, Some(t)) => Restriction::Nvs(t),
        (None, None) => Restriction::Full,
    };
    TranslateSettings {
        beam: a.beam,
        greedy: a.greedy,
        length_alpha: a.length_alpha,
        restriction,
        min_len: a.min_len,
        max_len: a.max_len,
    }
}

fn load_shortlist(a: &DecodeArgs, vocabs: &Vocabularies) -> Result<Option<Shortlist>> {
    a.shortlist
        .as_ref()
        .map(|p| Shortlist::load(p, &vocabs.source, &vocabs.target))
        .transpose()
}

/// Surface tokens, each followed by `|factor` for every factor stream.
fn format_text(t: &Translation) -> String {
    if t.factors.is_empty() {
        return t.text.clone();
    }
    let streams: Vec<Vec<&str>> = t.factors.iter().map(|f| f.split_whitespace().collect()).collect();
    t.tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            let mut s = tok.clone();
            for f in &streams {
                s.push('|');
                s.push_str(f.get(i).copied().unwrap_or(""));
            }
            s
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Translates `input` line by line. Failed sentences print an empty line and
/// a diagnostic; the first failure is returned after all lines are done.
pub fn translate_stream(a: &TranslateArgs, input: impl BufRead, out: &mut impl Write) -> Result<bool> {
    let loaded = load_model(&a.decode)?;
    if a.decode.show_config {
        write_out(out, loaded.trained.config.to_text().as_bytes())?;
        return Ok(true);
    }
    let vocabs = &loaded.trained.vocabs;
    let shortlist = load_shortlist(&a.decode, vocabs)?;
    let settings = settings(&a.decode, shortlist.as_ref());
    if a.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }

    let mut first_error: Option<Error> = None;
    let mut lines = input.lines().enumerate().peekable();
    while lines.peek().is_some() {
        let mut batch = Vec::with_capacity(a.batch_size);
        for (i, line) in lines.by_ref().take(a.batch_size) {
            let line = line.map_err(|e| Error::io("stdin", e))?;
            let parsed = if a.json {
                SentenceInput::from_json(&line)
            } else {
                Ok(SentenceInput::from_text(&line))
            };
            batch.push((
                i + 1,
                parsed.map(|mut s| {
                    s.options.strip_prefix |= a.strip_prefix;
                    s.options.prefix_all_chunks |= a.prefix_all_chunks;
                    s
                }),
            ));
        }
        let ok: Vec<SentenceInput> = batch.iter().filter_map(|(_, p)| p.as_ref().ok().cloned()).collect();
        let mut results = translate(&loaded.model, vocabs, &ok, &settings).into_iter();
        for (line_no, parsed) in batch {
            let result = match parsed {
                Ok(_) => results.next().expect("one result per parsed input"),
                Err(e) => Err(e),
            };
            let text = match result {
                Ok(t) if a.output_json => serde_json::to_string(&t)?,
                Ok(t) => format_text(&t),
                Err(e) => {
                    log::error!("line {line_no}: {e}");
                    first_error.get_or_insert(Error::Line {
                        line: line_no,
                        message: e.to_string(),
                    });
                    String::new()
                }
            };
            write_out(out, text.as_bytes())?;
            write_out(out, b"\n")?;
        }
        out.flush().map_err(|e| Error::io("stdout", e))?;
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(false),
    }
}

pub fn build_shortlist(a: &ShortlistArgs) -> Result<()> {
    let src = read_lines(&a.source)?;
    let trg = read_lines(&a.target)?;
    if src.len() != trg.len() {
        return Err(Error::Alignment {
            left_name: a.source.display().to_string(),
            left: src.len(),
            right_name: a.target.display().to_string(),
            right: trg.len(),
        });
    }
    let (sv, tv) = match &a.vocab_dir {
        Some(dir) => {
            let v = Vocabularies::load(dir)?;
            (v.source, v.target)
        }
        None => (
            Vocabulary::build(src.iter().flat_map(|l| tokens(l)), 1, None, false)?,
            Vocabulary::build(trg.iter().flat_map(|l| tokens(l)), 1, None, false)?,
        ),
    };
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = src
        .iter()
        .zip(&trg)
        .map(|(s, t)| (sv.encode_all(&tokens(s)), tv.encode_all(&tokens(t))))
        .collect();
    let model1 = train_model1(&pairs, a.iterations)?;
    for (i, ll) in model1.log_likelihoods.iter().enumerate() {
        log::info!("iteration {i}: log-likelihood {ll:.4}");
    }
    extract_shortlist(&model1.table, a.k)?.save(&a.output, &sv, &tv)
}

pub fn bench(a: &BenchArgs, stdin: impl BufRead, out: &mut impl Write) -> Result<bool> {
    let loaded = load_model(&a.decode)?;
    let cfg = &loaded.trained.config;
    if a.decode.show_config {
        write_out(out, cfg.to_text().as_bytes())?;
        return Ok(true);
    }
    let lines = match &a.input {
        Some(p) => read_lines(p)?,
        None => stdin
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io("stdin", e))?,
    };
    let inputs: Vec<SentenceInput> = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| SentenceInput::from_text(l))
        .collect();
    if inputs.is_empty() {
        return Err(Error::Input("no benchmark sentences".into()));
    }
    let vocabs = &loaded.trained.vocabs;
    let shortlist = load_shortlist(&a.decode, vocabs)?;
    let settings = settings(&a.decode, shortlist.as_ref());

    let start = Instant::now();
    let mut sentences = 0usize;
    let mut out_tokens = 0usize;
    for _ in 0..a.repeat.max(1) {
        for input in &inputs {
            let t = translate_sentence(&loaded.model, vocabs, input, &settings)?;
            sentences += 1;
            out_tokens += t.tokens.len();
        }
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    let src_len = inputs.iter().map(|i| i.tokens.len()).sum::<usize>() / inputs.len();
    let mean_out = out_tokens / sentences.max(1);
    let step = decoder_step_cost(cfg, mean_out / 2, src_len);
    let report = format!(
        "sentences\t{sentences}\n\
         output_tokens\t{out_tokens}\n\
         seconds\t{secs:.6}\n\
         sentences_per_sec\t{:.3}\n\
         tokens_per_sec\t{:.3}\n\
         decoder_step_cost\t{}\n\
         decoder_layers_cost\t{}\n",
        sentences as f64 / secs,
        out_tokens as f64 / secs,
        step.total(),
        step.layers(),
    );
    write_out(out, report.as_bytes())?;
    Ok(false)
}

pub fn quantize(a: &QuantizeArgs) -> Result<()> {
    let trained = TrainedModel::open(&a.model)?;
    let params = ModelParams::load(&trained.params_path(Some(&a.params)))?;
    params.check_schema(&trained.config)?;
    QuantizedParams::quantize(&params)?.save(&a.output)
}
