//! Lexical shortlists: a Model 1 aligner and per-source-token top-k target
//! lists used to restrict the output vocabulary.

mod model1;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub use model1::{train_model1, LexicalTable, Model1, NULL_SOURCE, PRUNE_THRESHOLD};

use crate::dataprep::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{EOS, PAD, UNK};

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_ITERATIONS: usize = 5;

/// Top-k target ids with their probabilities, keyed by source id.
#[derive(Clone, Debug, PartialEq)]
pub struct Shortlist {
    k: usize,
    rows: BTreeMap<u32, Vec<(u32, f32)>>,
}

impl Shortlist {
    /// Rows must already be sorted by descending probability.
    pub fn from_rows(k: usize, rows: BTreeMap<u32, Vec<(u32, f32)>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("shortlist k must be at least 1".into()));
        }
        for (s, r) in &rows {
            if r.len() > k {
                return Err(Error::Input(format!("row {s} has {} entries, k is {k}", r.len())));
            }
            let mut ids: Vec<u32> = r.iter().map(|e| e.0).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != r.len() || r.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(Error::Input(format!("row {s} is not a sorted duplicate-free list")));
            }
        }
        Ok(Self { k, rows })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, source: u32) -> &[(u32, f32)] {
        self.rows.get(&source).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rows(&self) -> impl Iterator<Item = (u32, &[(u32, f32)])> {
        self.rows.iter().map(|(s, r)| (*s, r.as_slice()))
    }

    /// Sorted union of the rows of `source` plus PAD, UNK and EOS.
    pub fn candidates(&self, source: &[u32]) -> Vec<u32> {
        let mut c = vec![PAD, UNK, EOS];
        for s in source {
            c.extend(self.row(*s).iter().map(|e| e.0));
        }
        c.sort_unstable();
        c.dedup();
        c
    }

    /// One line per source token: `source<TAB>target:prob target:prob ...`,
    /// preceded by a `#k=` header.
    pub fn to_text(&self, src: &Vocabulary, trg: &Vocabulary) -> String {
        let mut out = format!("#k={}\n", self.k);
        for (s, row) in &self.rows {
            out.push_str(src.token(*s));
            out.push('\t');
            for (i, (t, p)) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{}:{}", trg.token(*t), p);
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Shortlist::to_text`] output. Tokens missing from the
    /// vocabularies are skipped with a warning.
    pub fn from_text(text: &str, src: &Vocabulary, trg: &Vocabulary) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let k = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("#k="))
            .and_then(|k| k.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Line {
                line: 1,
                message: "expected a #k= header".into(),
            })?;
        let mut rows = BTreeMap::new();
        let mut skipped = 0usize;
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Line { line: i + 1, message };
            let (s, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
            let Some(sid) = src.id(s) else {
                skipped += 1;
                continue;
            };
            let mut row = Vec::new();
            for entry in rest.split(' ').filter(|e| !e.is_empty()) {
                let (t, p) = entry
                    .rsplit_once(':')
                    .ok_or_else(|| bad(format!("entry {entry:?} lacks ':'")))?;
                let p: f32 = p.parse().map_err(|_| bad(format!("bad probability in {entry:?}")))?;
                match trg.id(t) {
                    Some(tid) => row.push((tid, p)),
                    None => skipped += 1,
                }
            }
            if rows.insert(sid, row).is_some() {
                return Err(bad(format!("duplicate source token {s:?}")));
            }
        }
        if skipped > 0 {
            log::warn!("shortlist: skipped {skipped} tokens missing from the vocabularies");
        }
        Self::from_rows(k, rows)
    }

    pub fn save(&self, path: &Path, src: &Vocabulary, trg: &Vocabulary) -> Result<()> {
        std::fs::write(path, self.to_text(src, trg)).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path, src: &Vocabulary, trg: &Vocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text, src, trg)
    }
}

/// Top `k` targets of every non-NULL source row; ties by lowest target id.
pub fn extract_shortlist(table: &LexicalTable, k: usize) -> Result<Shortlist> {
    let mut rows = BTreeMap::new();
    for s in table.sources() {
        if s == NULL_SOURCE {
            continue;
        }
        let mut row: Vec<(u32, f64)> = table.row(s).to_vec();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        row.truncate(k);
        rows.insert(s, row.into_iter().map(|(t, p)| (t, p as f32)).collect());
    }
    Shortlist::from_rows(k, rows)
}
