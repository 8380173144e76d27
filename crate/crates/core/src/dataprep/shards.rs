//! Binary shards of id-encoded parallel sentences.
//!
//! Shard file layout, little-endian:
//!
//! ```text
//! "SKD1" | version u32 | shard index u32 | record count u32 | records...
//! record: stream count u32 | per stream: length u32, ids u32...
//! ```
//!
//! Streams are ordered source, source factors, target, target factors.
//! Target factor streams carry the leading SHIFT label.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{Vocabularies, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Example, SHIFT};

const SHARD_MAGIC: &[u8; 4] = b"SKD1";
const SHARD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_MAX_LEN: usize = 95;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shard of input line `line_index`: `splitmix64(seed ^ splitmix64(line_index)) % n`.
pub fn shard_of(seed: u64, line_index: u64, num_shards: usize) -> usize {
    (splitmix64(seed ^ splitmix64(line_index)) % num_shards as u64) as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub sentences: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_shards: usize,
    pub seed: u64,
    pub max_len: usize,
    pub streams: Vec<String>,
    pub num_source_factors: usize,
    pub num_target_factors: usize,
    pub sentences: usize,
    pub filtered: usize,
    pub shards: Vec<ShardInfo>,
}

/// A prepared data directory: manifest, vocabularies and shards.
#[derive(Clone, Debug)]
pub struct ShardSet {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl ShardSet {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.shards.len() != manifest.num_shards {
            return Err(Error::Input(format!(
                "manifest lists {} shards but declares {}",
                manifest.shards.len(),
                manifest.num_shards
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn vocabularies(&self) -> Result<Vocabularies> {
        Vocabularies::load(&self.dir)
    }

    /// Reads and verifies shard `i`.
    pub fn load_shard(&self, i: usize) -> Result<Vec<Example>> {
        let info = self
            .manifest
            .shards
            .get(i)
            .ok_or_else(|| Error::Input(format!("no shard {i}")))?;
        let path = self.dir.join(&info.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let corrupt = |reason: String| Error::CorruptShard {
            shard: info.file.clone(),
            reason,
        };
        if hex::encode(Sha256::digest(&bytes)) != info.sha256 {
            return Err(corrupt("checksum mismatch".into()));
        }
        let examples = decode_shard(&bytes, i, &self.manifest).map_err(corrupt)?;
        if examples.len() != info.sentences {
            return Err(corrupt(format!(
                "{} records, manifest says {}",
                examples.len(),
                info.sentences
            )));
        }
        Ok(examples)
    }

    /// Every pair, shard by shard.
    pub fn load_all(&self) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(self.manifest.sentences);
        for i in 0..self.manifest.num_shards {
            out.extend(self.load_shard(i)?);
        }
        Ok(out)
    }
}

fn encode_shard(index: usize, examples: &[&Example]) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(SHARD_MAGIC);
    for v in [SHARD_VERSION, index as u32, examples.len() as u32] {
        w.extend_from_slice(&v.to_le_bytes());
    }
    for ex in examples {
        let streams: Vec<&Vec<u32>> = std::iter::once(&ex.src)
            .chain(&ex.src_factors)
            .chain(std::iter::once(&ex.trg))
            .chain(&ex.trg_factors)
            .collect();
        w.extend_from_slice(&(streams.len() as u32).to_le_bytes());
        for s in streams {
            w.extend_from_slice(&(s.len() as u32).to_le_bytes());
            for id in s {
                w.extend_from_slice(&id.to_le_bytes());
            }
        }
    }
    w
}

fn decode_shard(bytes: &[u8], index: usize, manifest: &Manifest) -> std::result::Result<Vec<Example>, String> {
    let mut pos = 0usize;
    let mut u32_at = |what: &str| -> std::result::Result<u32, String> {
        let b = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| format!("truncated while reading {what}"))?;
        pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    if bytes.get(..4) != Some(SHARD_MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    u32_at("magic")?;
    if u32_at("version")? != SHARD_VERSION {
        return Err("unsupported version".into());
    }
    if u32_at("index")? as usize != index {
        return Err("shard index does not match the manifest".into());
    }
    let count = u32_at("count")? as usize;
    let (nsf, ntf) = (manifest.num_source_factors, manifest.num_target_factors);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = u32_at("stream count")? as usize;
        if n != 2 + nsf + ntf {
            return Err(format!("record has {n} streams, expected {}", 2 + nsf + ntf));
        }
        let mut streams = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32_at("length")? as usize;
            let s = (0..len).map(|_| u32_at("id")).collect::<std::result::Result<Vec<u32>, String>>()?;
            streams.push(s);
        }
        let mut it = streams.into_iter();
        let src = it.next().unwrap();
        let src_factors = it.by_ref().take(nsf).collect();
        let trg = it.next().unwrap();
        let trg_factors = it.collect();
        out.push(Example {
            src,
            src_factors,
            trg,
            trg_factors,
        });
    }
    if pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

/// Inputs of [`prepare_shards`].
#[derive(Clone, Debug)]
pub struct PrepareConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub source_factors: Vec<PathBuf>,
    pub target_factors: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub num_shards: usize,
    pub seed: u64,
    pub max_len: usize,
    pub min_count: usize,
    pub max_vocab: Option<usize>,
    /// Reuse these vocabularies instead of building new ones.
    pub vocabs: Option<Vocabularies>,
}

impl PrepareConfig {
    pub fn new(source: PathBuf, target: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            source,
            target,
            source_factors: Vec::new(),
            target_factors: Vec::new(),
            out_dir,
            num_shards: 1,
            seed: 13,
            max_len: DEFAULT_MAX_LEN,
            min_count: 1,
            max_vocab: None,
            vocabs: None,
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Whitespace-tokenized streams of one input line.
struct RawPair {
    index: usize,
    streams: Vec<Vec<String>>,
}

/// Reads, aligns, length-filters and tokenizes parallel files.
fn read_corpus(cfg: &PrepareConfig) -> Result<(Vec<RawPair>, usize)> {
    let files: Vec<(&Path, String)> = std::iter::once((cfg.source.as_path(), "source".to_string()))
        .chain(
            cfg.source_factors
                .iter()
                .enumerate()
                .map(|(i, p)| (p.as_path(), format!("source factor {i}"))),
        )
        .chain(std::iter::once((cfg.target.as_path(), "target".to_string())))
        .chain(
            cfg.target_factors
                .iter()
                .enumerate()
                .map(|(i, p)| (p.as_path(), format!("target factor {i}"))),
        )
        .collect();
    let texts = files
        .iter()
        .map(|(p, _)| read_lines(p))
        .collect::<Result<Vec<_>>>()?;
    for ((_, name), lines) in files.iter().zip(&texts).skip(1) {
        if lines.len() != texts[0].len() {
            return Err(Error::Alignment {
                left_name: "source".into(),
                left: texts[0].len(),
                right_name: name.clone(),
                right: lines.len(),
            });
        }
    }
    let nsf = cfg.source_factors.len();
    let trg_stream = 1 + nsf;
    let n = texts[0].len();
    let tokenized: Vec<Result<Option<RawPair>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let streams: Vec<Vec<String>> = texts
                .iter()
                .map(|t| t[i].split_whitespace().map(str::to_string).collect())
                .collect();
            for (s, (_, name)) in streams.iter().zip(&files) {
                let surface = if name.starts_with("target") {
                    &streams[trg_stream]
                } else {
                    &streams[0]
                };
                if s.len() != surface.len() {
                    return Err(Error::Line {
                        line: i + 1,
                        message: format!("{name} has {} tokens, its surface stream has {}", s.len(), surface.len()),
                    });
                }
            }
            let (sl, tl) = (streams[0].len(), streams[trg_stream].len());
            if sl == 0 || tl == 0 || sl > cfg.max_len || tl > cfg.max_len {
                return Ok(None);
            }
            Ok(Some(RawPair { index: i, streams }))
        })
        .collect();
    let mut kept = Vec::with_capacity(n);
    for r in tokenized {
        if let Some(p) = r? {
            kept.push(p);
        }
    }
    let filtered = n - kept.len();
    Ok((kept, filtered))
}

fn build_vocabs(cfg: &PrepareConfig, pairs: &[RawPair]) -> Result<Vocabularies> {
    let nsf = cfg.source_factors.len();
    let build = |stream: usize, factor: bool| {
        Vocabulary::build(
            pairs.iter().flat_map(|p| p.streams[stream].iter().map(String::as_str)),
            if factor { 1 } else { cfg.min_count },
            if factor { None } else { cfg.max_vocab },
            factor,
        )
    };
    if pairs.is_empty() {
        return Err(Error::Input("no sentence pairs survive filtering".into()));
    }
    Ok(Vocabularies {
        source: build(0, false)?,
        source_factors: (0..nsf).map(|i| build(1 + i, false)).collect::<Result<_>>()?,
        target: build(1 + nsf, false)?,
        target_factors: (0..cfg.target_factors.len())
            .map(|i| build(2 + nsf + i, true))
            .collect::<Result<_>>()?,
    })
}

/// Encodes one tokenized pair; target factor streams gain the SHIFT label.
fn encode_pair(v: &Vocabularies, streams: &[Vec<String>]) -> Example {
    let nsf = v.source_factors.len();
    let mut it = streams.iter();
    let src = v.source.encode_all(it.next().unwrap());
    let src_factors = v
        .source_factors
        .iter()
        .zip(it.by_ref().take(nsf))
        .map(|(fv, s)| fv.encode_all(s))
        .collect();
    let trg = v.target.encode_all(it.next().unwrap());
    let trg_factors = v
        .target_factors
        .iter()
        .zip(it)
        .map(|(fv, s)| std::iter::once(SHIFT).chain(fv.encode_all(s)).collect())
        .collect();
    Example {
        src,
        src_factors,
        trg,
        trg_factors,
    }
}

/// Tokenizes, filters, encodes and shards a parallel corpus.
///
/// Output is written to a temporary sibling directory and renamed into place
/// only on success.
pub fn prepare_shards(cfg: &PrepareConfig) -> Result<ShardSet> {
    if cfg.num_shards == 0 {
        return Err(Error::Config("num_shards must be at least 1".into()));
    }
    if cfg.out_dir.exists() {
        return Err(Error::Input(format!("{} already exists", cfg.out_dir.display())));
    }
    let (pairs, filtered) = read_corpus(cfg)?;
    let vocabs = match &cfg.vocabs {
        Some(v) => {
            if v.source_factors.len() != cfg.source_factors.len() || v.target_factors.len() != cfg.target_factors.len() {
                return Err(Error::Config("given vocabularies do not match the factor files".into()));
            }
            v.clone()
        }
        None => build_vocabs(cfg, &pairs)?,
    };
    let encoded: Vec<(usize, Example)> = pairs
        .par_iter()
        .map(|p| (p.index, encode_pair(&vocabs, &p.streams)))
        .collect();
    let mut buckets: Vec<Vec<&Example>> = vec![Vec::new(); cfg.num_shards];
    for (index, ex) in &encoded {
        buckets[shard_of(cfg.seed, *index as u64, cfg.num_shards)].push(ex);
    }

    let parent = cfg
        .out_dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = cfg
        .out_dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a directory name", cfg.out_dir.display())))?;
    let tmp = parent.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = write_set(cfg, &tmp, &buckets, &vocabs, encoded.len(), filtered);
    match result {
        Ok(manifest) => {
            fs::rename(&tmp, &cfg.out_dir).map_err(|e| {
                let _ = fs::remove_dir_all(&tmp);
                Error::io(cfg.out_dir.display().to_string(), e)
            })?;
            Ok(ShardSet {
                dir: cfg.out_dir.clone(),
                manifest,
            })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn write_set(
    cfg: &PrepareConfig,
    dir: &Path,
    buckets: &[Vec<&Example>],
    vocabs: &Vocabularies,
    sentences: usize,
    filtered: usize,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    vocabs.save(dir)?;
    let shards = buckets
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let bytes = encode_shard(i, b);
            let file = format!("shard.{i:05}.bin");
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
            Ok(ShardInfo {
                file,
                sentences: b.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let nsf = cfg.source_factors.len();
    let ntf = cfg.target_factors.len();
    let streams = std::iter::once("source".to_string())
        .chain((0..nsf).map(|i| format!("source_factor{i}")))
        .chain(std::iter::once("target".to_string()))
        .chain((0..ntf).map(|i| format!("target_factor{i}")))
        .collect();
    let manifest = Manifest {
        version: SHARD_VERSION,
        num_shards: cfg.num_shards,
        seed: cfg.seed,
        max_len: cfg.max_len,
        streams,
        num_source_factors: nsf,
        num_target_factors: ntf,
        sentences,
        filtered,
        shards,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Padded target tokens of a batch: sentences times the longest decoder input.
pub fn batch_target_tokens(batch: &[Example]) -> usize {
    batch.len() * batch.iter().map(|e| e.trg.len() + 1).max().unwrap_or(0)
}

/// Position of a [`ShardIterator`] inside an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterPosition {
    /// Index into the shuffled shard order of the shard being consumed.
    pub shard: usize,
    /// Batches of that shard already yielded.
    pub batch: usize,
}

/// Streams batches one shard at a time.
///
/// Shard order and batch order within a shard are shuffled by `epoch_seed`;
/// within a shard, sentences are bucketed by length and packed so that the
/// padded target token count stays within `batch_tokens` (a longer sentence
/// forms a batch of its own).
pub struct ShardIterator<'a> {
    set: &'a ShardSet,
    batch_tokens: usize,
    epoch_seed: u64,
    order: Vec<usize>,
    position: IterPosition,
    queue: VecDeque<Vec<Example>>,
    failed: bool,
}

impl<'a> ShardIterator<'a> {
    pub fn new(set: &'a ShardSet, batch_tokens: usize, epoch_seed: u64) -> Self {
        Self::resume(set, batch_tokens, epoch_seed, IterPosition::default())
    }

    /// Continues an epoch from `position`.
    pub fn resume(set: &'a ShardSet, batch_tokens: usize, epoch_seed: u64, position: IterPosition) -> Self {
        let mut order: Vec<usize> = (0..set.manifest.num_shards).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        Self {
            set,
            batch_tokens: batch_tokens.max(1),
            epoch_seed,
            order,
            position,
            queue: VecDeque::new(),
            failed: false,
        }
    }

    /// Position of the next batch to be yielded.
    pub fn position(&self) -> IterPosition {
        self.position
    }

    fn fill(&mut self) -> Result<bool> {
        while self.queue.is_empty() {
            let Some(&shard) = self.order.get(self.position.shard) else {
                return Ok(false);
            };
            let mut examples = self.set.load_shard(shard)?;
            examples.sort_by_key(|e| (e.trg.len(), e.src.len()));
            let mut batches: Vec<Vec<Example>> = Vec::new();
            let mut cur: Vec<Example> = Vec::new();
            for ex in examples {
                let width = ex.trg.len() + 1;
                if !cur.is_empty() && (cur.len() + 1) * width > self.batch_tokens {
                    batches.push(std::mem::take(&mut cur));
                }
                cur.push(ex);
            }
            if !cur.is_empty() {
                batches.push(cur);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.epoch_seed ^ splitmix64(shard as u64)));
            batches.shuffle(&mut rng);
            let skip = self.position.batch.min(batches.len());
            self.queue.extend(batches.into_iter().skip(skip));
            if self.queue.is_empty() {
                self.position = IterPosition {
                    shard: self.position.shard + 1,
                    batch: 0,
                };
            }
        }
        Ok(true)
    }
}

impl Iterator for ShardIterator<'_> {
    type Item = Result<Vec<Example>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.fill() {
            Ok(false) => None,
            Ok(true) => {
                let batch = self.queue.pop_front().expect("filled");
                self.position.batch += 1;
                if self.queue.is_empty() {
                    self.position = IterPosition {
                        shard: self.position.shard + 1,
                        batch: 0,
                    };
                }
                Some(Ok(batch))
            }
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}
