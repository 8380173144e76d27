use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::kernels::log_softmax_in_place;
use crate::model::{DecoderState, InferenceModel, TargetFactorOutput, BOS, EOS, SHIFT};

/// Anything that can run one incremental decoder step.
pub trait StepModel {
    type State: Clone;

    fn num_factors(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// Feeds `token` with `factors` at `step`; surface logits cover
    /// `candidates` (in order) or the whole vocabulary.
    fn step(
        &self,
        state: &mut Self::State,
        step: usize,
        token: u32,
        factors: &[u32],
        candidates: Option<&[u32]>,
    ) -> Result<TargetFactorOutput>;
}

impl StepModel for InferenceModel {
    type State = DecoderState;

    fn num_factors(&self) -> usize {
        self.config().target_factor_specs.len()
    }

    fn vocab_size(&self) -> usize {
        self.config().target_vocab_size
    }

    fn step(
        &self,
        state: &mut DecoderState,
        step: usize,
        token: u32,
        factors: &[u32],
        candidates: Option<&[u32]>,
    ) -> Result<TargetFactorOutput> {
        self.decode_step(state, step, token, factors, candidates)
    }
}

/// Target tokens forced at the start of the output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Prefix {
    pub tokens: Vec<u32>,
    /// Per factor stream; entry `j` overrides the factor of output token `j`.
    pub factors: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOptions {
    pub beam: usize,
    pub length_alpha: f32,
    /// Output tokens before EOS is forced.
    pub max_len: usize,
    /// EOS is masked while fewer tokens than this have been produced.
    pub min_len: usize,
}

impl SearchOptions {
    pub fn new(beam: usize, max_len: usize) -> Self {
        Self {
            beam,
            length_alpha: 1.0,
            max_len,
            min_len: 0,
        }
    }
}

/// Longest output for a source of `src_len` tokens.
pub fn max_output_len(src_len: usize) -> usize {
    2 * src_len + 10
}

/// A finished search result. `tokens` ends with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Per factor stream, one entry per token before EOS.
    pub factors: Vec<Vec<u32>>,
    /// Sum of the chosen surface log-probs.
    pub log_prob: f32,
    /// `log_prob / len^alpha`, EOS counted.
    pub score: f32,
    pub finished: bool,
    /// The length limit ended the search.
    pub forced_eos: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn normalize(log_prob: f32, len: usize, alpha: f32) -> f32 {
    log_prob / (len as f32).powf(alpha)
}

/// Lowest index of the maximum.
fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Maps ids to positions in the step output.
struct Space<'a> {
    candidates: Option<&'a [u32]>,
    size: usize,
}

impl Space<'_> {
    fn id(&self, pos: usize) -> u32 {
        match self.candidates {
            Some(c) => c[pos],
            None => pos as u32,
        }
    }

    fn pos(&self, id: u32) -> Option<usize> {
        match self.candidates {
            Some(c) => c.binary_search(&id).ok(),
            None => ((id as usize) < self.size).then_some(id as usize),
        }
    }
}

fn validate<M: StepModel>(
    model: &M,
    candidates: Option<&[u32]>,
    prefix: &Prefix,
    opts: &SearchOptions,
) -> Result<()> {
    if opts.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if let Some(c) = candidates {
        if c.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("candidate ids must be strictly ascending".into()));
        }
        if c.binary_search(&EOS).is_err() {
            return Err(Error::Input("candidate ids must include EOS".into()));
        }
    }
    if prefix.tokens.len() > opts.max_len {
        return Err(Error::Input(format!(
            "target prefix of {} tokens exceeds the output limit of {}",
            prefix.tokens.len(),
            opts.max_len
        )));
    }
    if prefix.factors.len() > model.num_factors() {
        return Err(Error::Input(format!(
            "{} prefix factor streams given, model has {}",
            prefix.factors.len(),
            model.num_factors()
        )));
    }
    let space = Space {
        candidates,
        size: model.vocab_size(),
    };
    if let Some(&bad) = prefix.tokens.iter().find(|&&t| space.pos(t).is_none()) {
        return Err(Error::Input(format!("prefix token {bad} is outside the active vocabulary")));
    }
    Ok(())
}

/// Factors of output token `step - 1`, read from the step-`step` output.
fn choose_factors(out: &TargetFactorOutput, step: usize, prefix: &Prefix) -> Vec<u32> {
    if step == 0 {
        return vec![SHIFT; out.factor_logits.len()];
    }
    out.factor_logits
        .iter()
        .enumerate()
        .map(|(i, logits)| {
            prefix
                .factors
                .get(i)
                .and_then(|f| f.get(step - 1))
                .copied()
                .unwrap_or(argmax(logits) as u32)
        })
        .collect()
}

/// Surface log-probs with EOS masked before `min_len`.
fn step_log_probs(out: &TargetFactorOutput, space: &Space, step: usize, opts: &SearchOptions) -> Vec<f32> {
    let mut lp = out.surface_logits.clone();
    log_softmax_in_place(&mut lp);
    if step < opts.min_len && step < opts.max_len {
        if let Some(p) = space.pos(EOS) {
            lp[p] = f32::NEG_INFINITY;
        }
    }
    lp
}

/// Position chosen at `step` when exactly one token is allowed.
fn forced_pos(space: &Space, step: usize, prefix: &Prefix, opts: &SearchOptions) -> Option<usize> {
    if let Some(&t) = prefix.tokens.get(step) {
        space.pos(t)
    } else if step == opts.max_len {
        space.pos(EOS)
    } else {
        None
    }
}

/// Argmax decoding with no beam bookkeeping.
pub fn greedy_search<M: StepModel>(
    model: &M,
    mut state: M::State,
    candidates: Option<&[u32]>,
    prefix: &Prefix,
    opts: &SearchOptions,
) -> Result<Hypothesis> {
    validate(model, candidates, prefix, opts)?;
    let space = Space {
        candidates,
        size: model.vocab_size(),
    };
    let nf = model.num_factors();
    let mut token = BOS;
    let mut feed = vec![BOS; nf];
    let mut tokens = Vec::new();
    let mut factors = vec![Vec::new(); nf];
    let mut log_prob = 0.0f32;
    let mut forced_eos = false;
    for step in 0..=opts.max_len {
        let out = model.step(&mut state, step, token, &feed, candidates)?;
        let chosen = choose_factors(&out, step, prefix);
        if step > 0 {
            factors.iter_mut().zip(&chosen).for_each(|(f, &c)| f.push(c));
        }
        let lp = step_log_probs(&out, &space, step, opts);
        let pos = match forced_pos(&space, step, prefix, opts) {
            Some(p) => {
                if step == opts.max_len && step >= prefix.tokens.len() {
                    forced_eos = space.id(argmax(&lp)) != EOS;
                }
                p
            }
            None => argmax(&lp),
        };
        token = space.id(pos);
        log_prob += lp[pos];
        tokens.push(token);
        if token == EOS {
            break;
        }
        feed = chosen;
    }
    let score = normalize(log_prob, tokens.len(), opts.length_alpha);
    Ok(Hypothesis {
        tokens,
        factors,
        log_prob,
        score,
        finished: true,
        forced_eos,
    })
}

struct Live<S> {
    state: S,
    token: u32,
    feed: Vec<u32>,
    tokens: Vec<u32>,
    factors: Vec<Vec<u32>>,
    log_prob: f32,
}

struct Expansion {
    score: f32,
    step_lp: f32,
    token: u32,
    parent: usize,
}

/// Score descending, then step log-prob descending, then token and parent
/// ascending. The step log-prob key keeps beam 1 identical to greedy when
/// adding the prefix score rounds distinct candidates to the same value.
fn rank(a: &Expansion, b: &Expansion) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.step_lp.total_cmp(&a.step_lp))
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Beam search over surface tokens; factors follow each hypothesis greedily.
pub fn beam_search<M: StepModel>(
    model: &M,
    state: M::State,
    candidates: Option<&[u32]>,
    prefix: &Prefix,
    opts: &SearchOptions,
) -> Result<Hypothesis> {
    validate(model, candidates, prefix, opts)?;
    let space = Space {
        candidates,
        size: model.vocab_size(),
    };
    let nf = model.num_factors();
    let mut live = vec![Live {
        state,
        token: BOS,
        feed: vec![BOS; nf],
        tokens: Vec::new(),
        factors: vec![Vec::new(); nf],
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..=opts.max_len {
        let mut expansions = Vec::new();
        let mut chosen = Vec::with_capacity(live.len());
        let mut cut_short = Vec::with_capacity(live.len());
        for (parent, h) in live.iter_mut().enumerate() {
            let out = model.step(&mut h.state, step, h.token, &h.feed, candidates)?;
            chosen.push(choose_factors(&out, step, prefix));
            let lp = step_log_probs(&out, &space, step, opts);
            cut_short.push(step == opts.max_len && step >= prefix.tokens.len() && space.id(argmax(&lp)) != EOS);
            let mut push = |pos: usize| {
                expansions.push(Expansion {
                    score: h.log_prob + lp[pos],
                    step_lp: lp[pos],
                    token: space.id(pos),
                    parent,
                })
            };
            match forced_pos(&space, step, prefix, opts) {
                Some(p) => push(p),
                None => (0..lp.len()).for_each(&mut push),
            }
        }
        expansions.sort_by(rank);
        expansions.truncate(opts.beam);
        let mut next = Vec::new();
        for e in expansions {
            let parent = &live[e.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(e.token);
            let mut factors = parent.factors.clone();
            if step > 0 {
                factors.iter_mut().zip(&chosen[e.parent]).for_each(|(f, &c)| f.push(c));
            }
            if e.token == EOS {
                finished.push(Hypothesis {
                    score: normalize(e.score, tokens.len(), opts.length_alpha),
                    tokens,
                    factors,
                    log_prob: e.score,
                    finished: true,
                    forced_eos: cut_short[e.parent],
                });
            } else {
                next.push(Live {
                    state: parent.state.clone(),
                    token: e.token,
                    feed: chosen[e.parent].clone(),
                    tokens,
                    factors,
                    log_prob: e.score,
                });
            }
        }
        live = next;
        if finished.len() >= opts.beam || live.is_empty() {
            break;
        }
    }
    // first of the best; earlier finishers win ties
    let best = finished
        .into_iter()
        .reduce(|a, b| if b.score > a.score { b } else { a })
        .ok_or_else(|| Error::Numeric("beam search finished no hypothesis".into()))?;
    Ok(best)
}
