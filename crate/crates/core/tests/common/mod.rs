#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use nmt_core::dataprep::{prepare_shards, PrepareConfig, ShardSet, Vocabularies};
use nmt_core::model::{Example, ModelConfig, SHIFT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source/target lines of a toy task, plus optional target factor lines.
pub struct Corpus {
    pub src: Vec<String>,
    pub trg: Vec<String>,
    pub trg_factors: Option<Vec<String>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn split(self, held_out: usize) -> (Corpus, Corpus) {
        let n = self.src.len() - held_out;
        let cut = |v: Vec<String>| {
            let mut a = v;
            let b = a.split_off(n);
            (a, b)
        };
        let (s1, s2) = cut(self.src);
        let (t1, t2) = cut(self.trg);
        let (f1, f2) = match self.trg_factors {
            Some(f) => {
                let (a, b) = cut(f);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        (
            Corpus {
                src: s1,
                trg: t1,
                trg_factors: f1,
            },
            Corpus {
                src: s2,
                trg: t2,
                trg_factors: f2,
            },
        )
    }
}

/// Random sequences over `vocab` words copied verbatim.
pub fn copy_corpus(n: usize, vocab: usize, max_len: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src: Vec<String> = (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect::<Vec<_>>().join(" ")
        })
        .collect();
    Corpus {
        trg: src.clone(),
        src,
        trg_factors: None,
    }
}

/// Copy task whose target is lowercased, with a case factor (`l`/`u`);
/// `upper_rate` of the pairs have every source word uppercased.
pub fn case_corpus(n: usize, vocab: usize, max_len: usize, upper_rate: f64, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Vec::with_capacity(n);
    let mut trg = Vec::with_capacity(n);
    let mut fac = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(1..=max_len);
        let upper_sentence = rng.gen_bool(upper_rate);
        let mut s = Vec::new();
        let mut t = Vec::new();
        let mut f = Vec::new();
        for _ in 0..len {
            let w = format!("w{}", rng.gen_range(0..vocab));
            // individual words are capitalised too, so the factor is not constant
            let upper = upper_sentence || rng.gen_bool(0.2);
            s.push(if upper { w.to_uppercase() } else { w.clone() });
            t.push(w);
            f.push(if upper { "u" } else { "l" });
        }
        src.push(s.join(" "));
        trg.push(t.join(" "));
        fac.push(f.join(" "));
    }
    Corpus {
        src,
        trg,
        trg_factors: Some(fac),
    }
}

pub fn write_lines(path: &Path, lines: &[String]) {
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// Writes the corpus and prepares shards into `dir/name`.
pub fn prepare(dir: &Path, name: &str, corpus: &Corpus, shards: usize, vocabs: Option<Vocabularies>) -> ShardSet {
    let s = dir.join(format!("{name}.src"));
    let t = dir.join(format!("{name}.trg"));
    write_lines(&s, &corpus.src);
    write_lines(&t, &corpus.trg);
    let mut cfg = PrepareConfig::new(s, t, dir.join(name));
    cfg.num_shards = shards;
    cfg.vocabs = vocabs;
    if let Some(f) = &corpus.trg_factors {
        let p = dir.join(format!("{name}.trg.factor0"));
        write_lines(&p, f);
        cfg.target_factors = vec![p];
    }
    prepare_shards(&cfg).unwrap()
}

/// Encodes held-out pairs with the training vocabularies.
pub fn encode(corpus: &Corpus, v: &Vocabularies) -> Vec<Example> {
    (0..corpus.len())
        .map(|i| {
            let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
            let trg = v.target.encode_all(&words(&corpus.trg[i]));
            let trg_factors = match &corpus.trg_factors {
                Some(f) => vec![std::iter::once(SHIFT)
                    .chain(v.target_factors[0].encode_all(&words(&f[i])))
                    .collect()],
                None => Vec::new(),
            };
            Example {
                src: v.source.encode_all(&words(&corpus.src[i])),
                src_factors: Vec::new(),
                trg,
                trg_factors,
            }
        })
        .collect()
}

/// Small config sized to the vocabularies of `set`.
pub fn config_for(v: &Vocabularies) -> ModelConfig {
    ModelConfig {
        source_vocab_size: v.source.len(),
        target_vocab_size: v.target.len(),
        target_factor_specs: v.target_factors.iter().map(|f| f.len()).collect(),
        ..ModelConfig::default()
    }
}

pub fn temp_path(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}
