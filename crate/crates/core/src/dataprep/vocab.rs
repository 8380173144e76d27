use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{NUM_SPECIALS, SHIFT, UNK};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const SHIFT_TOKEN: &str = "<shift>";

/// Token/id bijection for one stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    factor: bool,
}

impl Vocabulary {
    fn specials(factor: bool) -> Vec<String> {
        let mut s = vec![PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN];
        if factor {
            s.push(SHIFT_TOKEN);
        }
        s.into_iter().map(str::to_string).collect()
    }

    fn from_tokens(tokens: Vec<String>, factor: bool) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index, factor })
    }

    /// Ids by descending frequency, ties by token order; specials first.
    ///
    /// Tokens seen fewer than `min_count` times are left out, and at most
    /// `max_size` regular tokens are kept.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_size: Option<usize>,
        factor: bool,
    ) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in corpus {
            *counts.entry(tok).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let specials = Self::specials(factor);
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !specials.iter().any(|s| s == t))
            .collect();
        // stable sort keeps lexicographic order among equal counts
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        if let Some(m) = max_size {
            ranked.truncate(m);
        }
        let mut tokens = specials;
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens, factor)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_factor(&self) -> bool {
        self.factor
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn encode(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn encode_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// First id that is not reserved.
    pub fn first_regular_id(&self) -> u32 {
        if self.factor {
            SHIFT + 1
        } else {
            NUM_SPECIALS
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let factor = tokens.get(SHIFT as usize).map(String::as_str) == Some(SHIFT_TOKEN);
        let expected = Self::specials(factor);
        if tokens.len() < expected.len() || tokens[..expected.len()] != expected[..] {
            return Err(Error::Input(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        Self::from_tokens(tokens, factor)
    }
}

/// Vocabularies of every stream of a parallel corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    pub source: Vocabulary,
    pub source_factors: Vec<Vocabulary>,
    pub target: Vocabulary,
    pub target_factors: Vec<Vocabulary>,
}

impl Vocabularies {
    fn files(n_sf: usize, n_tf: usize) -> Vec<(String, bool)> {
        let mut f = vec![("vocab.src.txt".to_string(), false)];
        f.extend((0..n_sf).map(|i| (format!("vocab.src.factor{i}.txt"), false)));
        f.push(("vocab.trg.txt".to_string(), false));
        f.extend((0..n_tf).map(|i| (format!("vocab.trg.factor{i}.txt"), true)));
        f
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.source.save(&dir.join("vocab.src.txt"))?;
        for (i, v) in self.source_factors.iter().enumerate() {
            v.save(&dir.join(format!("vocab.src.factor{i}.txt")))?;
        }
        self.target.save(&dir.join("vocab.trg.txt"))?;
        for (i, v) in self.target_factors.iter().enumerate() {
            v.save(&dir.join(format!("vocab.trg.factor{i}.txt")))?;
        }
        Ok(())
    }

    /// Loads every vocabulary file found in `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let count = |prefix: &str| {
            (0..)
                .take_while(|i| dir.join(format!("{prefix}{i}.txt")).exists())
                .count()
        };
        let (n_sf, n_tf) = (count("vocab.src.factor"), count("vocab.trg.factor"));
        let mut loaded = Self::files(n_sf, n_tf)
            .into_iter()
            .map(|(f, _)| Vocabulary::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let source = loaded.next().unwrap();
        let source_factors = loaded.by_ref().take(n_sf).collect();
        let target = loaded.next().unwrap();
        let target_factors: Vec<Vocabulary> = loaded.collect();
        if let Some(i) = target_factors.iter().position(|v| !v.is_factor()) {
            return Err(Error::Input(format!("target factor vocabulary {i} lacks the shift token")));
        }
        Ok(Self {
            source,
            source_factors,
            target,
            target_factors,
        })
    }
}
