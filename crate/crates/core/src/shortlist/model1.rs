use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Source id of the empty word.
pub const NULL_SOURCE: u32 = u32::MAX;
/// Translation probabilities below this are dropped after every M-step.
pub const PRUNE_THRESHOLD: f64 = 1e-9;
const CHUNK: usize = 512;

fn key(s: u32, t: u32) -> u64 {
    ((s as u64) << 32) | t as u64
}

/// Sparse p(t|s), one row per source id sorted by target id.
#[derive(Clone, Debug, PartialEq)]
pub struct LexicalTable {
    rows: HashMap<u32, Vec<(u32, f64)>>,
}

impl LexicalTable {
    pub fn prob(&self, s: u32, t: u32) -> f64 {
        self.rows
            .get(&s)
            .and_then(|r| r.binary_search_by_key(&t, |e| e.0).ok().map(|i| r[i].1))
            .unwrap_or(0.0)
    }

    pub fn row(&self, s: u32) -> &[(u32, f64)] {
        self.rows.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Source ids with a row, ascending; NULL included.
    pub fn sources(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.rows.keys().copied().collect();
        s.sort_unstable();
        s
    }

    fn from_map(map: HashMap<u64, f64>) -> Self {
        let mut rows: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
        for (k, p) in map {
            rows.entry((k >> 32) as u32).or_default().push((k as u32, p));
        }
        for r in rows.values_mut() {
            r.sort_unstable_by_key(|e| e.0);
        }
        Self { rows }
    }
}

/// Trained table and the corpus log-likelihood before each iteration and
/// after the last one.
#[derive(Clone, Debug)]
pub struct Model1 {
    pub table: LexicalTable,
    pub log_likelihoods: Vec<f64>,
}

enum Params<'a> {
    Uniform(f64),
    Table(&'a LexicalTable),
}

impl Params<'_> {
    fn prob(&self, s: u32, t: u32) -> f64 {
        match self {
            Params::Uniform(u) => *u,
            Params::Table(tab) => tab.prob(s, t),
        }
    }
}

/// Expected counts and log-likelihood over one chunk of pairs.
fn e_step(chunk: &[(Vec<u32>, Vec<u32>)], p: &Params) -> (HashMap<u64, f64>, f64) {
    let mut counts: HashMap<u64, f64> = HashMap::new();
    let mut ll = 0.0;
    let mut scores = Vec::new();
    for (src, trg) in chunk {
        let l1 = (src.len() + 1) as f64;
        for &t in trg {
            scores.clear();
            scores.push(p.prob(NULL_SOURCE, t));
            scores.extend(src.iter().map(|&s| p.prob(s, t)));
            let z: f64 = scores.iter().sum();
            ll += (z.max(f64::MIN_POSITIVE) / l1).ln();
            if z <= 0.0 {
                continue;
            }
            for (s, &sc) in std::iter::once(&NULL_SOURCE).chain(src).zip(&scores) {
                if sc > 0.0 {
                    *counts.entry(key(*s, t)).or_default() += sc / z;
                }
            }
        }
    }
    (counts, ll)
}

/// Merges chunk results in chunk order.
fn run_e_step(corpus: &[(Vec<u32>, Vec<u32>)], p: &Params) -> (HashMap<u64, f64>, f64) {
    let parts: Vec<(HashMap<u64, f64>, f64)> = corpus.par_chunks(CHUNK).map(|c| e_step(c, p)).collect();
    let mut total: HashMap<u64, f64> = HashMap::new();
    let mut ll = 0.0;
    for (counts, l) in parts {
        ll += l;
        for (k, c) in counts {
            *total.entry(k).or_default() += c;
        }
    }
    (total, ll)
}

fn m_step(counts: HashMap<u64, f64>) -> LexicalTable {
    let mut entries: Vec<(u64, f64)> = counts.into_iter().collect();
    entries.sort_unstable_by_key(|e| e.0);
    let mut out = HashMap::with_capacity(entries.len());
    let mut i = 0;
    while i < entries.len() {
        let s = entries[i].0 >> 32;
        let end = i + entries[i..].iter().take_while(|e| e.0 >> 32 == s).count();
        let row = &entries[i..end];
        let total: f64 = row.iter().map(|e| e.1).sum();
        let kept: Vec<(u64, f64)> = row
            .iter()
            .map(|&(k, c)| (k, c / total))
            .filter(|e| e.1 >= PRUNE_THRESHOLD)
            .collect();
        let z: f64 = kept.iter().map(|e| e.1).sum();
        out.extend(kept.into_iter().map(|(k, p)| (k, p / z)));
        i = end;
    }
    LexicalTable::from_map(out)
}

/// IBM Model 1 p(t|s) with a NULL source word, uniform initialization and
/// `iterations` EM rounds.
pub fn train_model1(corpus: &[(Vec<u32>, Vec<u32>)], iterations: usize) -> Result<Model1> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    let mut targets: Vec<u32> = corpus.iter().flat_map(|p| p.1.iter().copied()).collect();
    targets.sort_unstable();
    targets.dedup();
    if targets.is_empty() || corpus.iter().all(|p| p.0.is_empty()) {
        return Err(Error::Input("cannot train an aligner on an empty corpus".into()));
    }
    let uniform = Params::Uniform(1.0 / targets.len() as f64);
    let (counts, ll) = run_e_step(corpus, &uniform);
    let mut lls = vec![ll];
    let mut table = m_step(counts);
    for _ in 1..iterations {
        let (counts, ll) = run_e_step(corpus, &Params::Table(&table));
        lls.push(ll);
        table = m_step(counts);
    }
    lls.push(run_e_step(corpus, &Params::Table(&table)).1);
    Ok(Model1 {
        table,
        log_likelihoods: lls,
    })
}
