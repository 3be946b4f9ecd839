//! Parallel corpora: loading, cleaning, seeded splitting and summary stats.
//!
//! A corpus is a list of aligned (source, target) sentence pairs read from two
//! one-sentence-per-line UTF-8 files. For cleaning and statistics a token is a
//! maximal run of non-whitespace characters.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line count mismatch: source has {source_lines} lines, target has {target_lines}")]
    LineCountMismatch { source_lines: usize, target_lines: usize },
    #[error("{path}: invalid UTF-8 on line {line}")]
    Decode { path: PathBuf, line: usize },
    #[error("corpus of {len} pairs is too small to split (need at least 3)")]
    CorpusTooSmall { len: usize },
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
}

impl SentencePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self { source: source.into(), target: target.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub source_lang: String,
    pub target_lang: String,
    /// Files the corpus was read from, if any.
    pub origin: Option<(PathBuf, PathBuf)>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, source_lang: impl Into<String>, target_lang: impl Into<String>) -> Self {
        Self { pairs, source_lang: source_lang.into(), target_lang: target_lang.into(), origin: None }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.target.as_str())
    }

    fn with_pairs(&self, pairs: Vec<SentencePair>) -> Self {
        Self { pairs, source_lang: self.source_lang.clone(), target_lang: self.target_lang.clone(), origin: self.origin.clone() }
    }
}

/// Reads one-sentence-per-line UTF-8 text. A final trailing newline does not
/// produce an extra empty line; `\r\n` terminators are accepted.
pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            String::from_utf8(line.to_vec()).map_err(|_| CorpusError::Decode { path: path.to_path_buf(), line: i + 1 })
        })
        .collect()
}

pub fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a str>) -> Result<(), CorpusError> {
    let mut out = String::new();
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

fn lang_of(path: &Path, fallback: &str) -> String {
    path.extension().and_then(|e| e.to_str()).filter(|e| !e.is_empty()).unwrap_or(fallback).to_string()
}

/// Loads an aligned corpus from two files. Language tags come from the file
/// extensions (`train.en` → `en`), falling back to `src`/`tgt`.
pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<ParallelCorpus, CorpusError> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch { source_lines: src.len(), target_lines: tgt.len() });
    }
    let pairs = src.into_iter().zip(tgt).map(|(s, t)| SentencePair { source: s, target: t }).collect();
    Ok(ParallelCorpus {
        pairs,
        source_lang: lang_of(source_path, "src"),
        target_lang: lang_of(target_path, "tgt"),
        origin: Some((source_path.to_path_buf(), target_path.to_path_buf())),
    })
}

pub fn write_parallel(corpus: &ParallelCorpus, source_path: &Path, target_path: &Path) -> Result<(), CorpusError> {
    write_lines(source_path, corpus.sources())?;
    write_lines(target_path, corpus.targets())
}

pub fn token_count(sentence: &str) -> usize {
    sentence.split_whitespace().count()
}

/// Keeps pairs whose two sides both have between `min_len` and `max_len`
/// tokens, optionally dropping repeated exact pairs (first one wins).
/// Survivors keep their relative order.
pub fn clean(corpus: &ParallelCorpus, min_len: usize, max_len: usize, drop_duplicates: bool) -> ParallelCorpus {
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let in_range = |s: &str| (min_len..=max_len).contains(&token_count(s));
    let pairs = corpus
        .pairs
        .iter()
        .filter(|p| in_range(&p.source) && in_range(&p.target))
        .filter(|p| !drop_duplicates || seen.insert((p.source.as_str(), p.target.as_str())))
        .cloned()
        .collect();
    corpus.with_pairs(pairs)
}

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_ratio: 0.8, valid_ratio: 0.1, test_ratio: 0.1, seed: 1 }
    }
}

impl SplitSpec {
    pub fn new(train_ratio: f64, valid_ratio: f64, test_ratio: f64, seed: u64) -> Result<Self, CorpusError> {
        let spec = Self { train_ratio, valid_ratio, test_ratio, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (name, r) in [("train", self.train_ratio), ("valid", self.valid_ratio), ("test", self.test_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(CorpusError::InvalidSplit(format!("{name} ratio {r} is not in (0, 1)")));
            }
        }
        let sum = self.train_ratio + self.valid_ratio + self.test_ratio;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Split sizes for a corpus of `n` pairs: validation and test get
    /// `round(n·ratio)` (at least one each), train takes the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let mut valid = ((n as f64 * self.valid_ratio).round() as usize).max(1);
        let mut test = ((n as f64 * self.test_ratio).round() as usize).max(1);
        while valid + test >= n && valid + test > 2 {
            if valid >= test {
                valid -= 1;
            } else {
                test -= 1;
            }
        }
        (n.saturating_sub(valid + test), valid, test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
}

/// Shuffles pair indices with the seeded Fisher–Yates pass from [`rng`], then
/// assigns contiguous runs to train, validation and test.
pub fn split(corpus: &ParallelCorpus, spec: &SplitSpec) -> Result<Splits, CorpusError> {
    spec.validate()?;
    let n = corpus.len();
    if n < 3 {
        return Err(CorpusError::CorpusTooSmall { len: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(spec.seed, &[0x5911]), &mut order);
    let (n_train, n_valid, _) = spec.sizes(n);
    let take = |idx: &[usize]| corpus.with_pairs(idx.iter().map(|&i| corpus.pairs[i].clone()).collect());
    Ok(Splits { train: take(&order[..n_train]), valid: take(&order[n_train..n_train + n_valid]), test: take(&order[n_train + n_valid..]) })
}

/// Paths `{prefix}.{split}.{lang}` for one split.
pub fn split_paths(prefix: &Path, split: &str, source_lang: &str, target_lang: &str) -> (PathBuf, PathBuf) {
    let base = prefix.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{base}.{split}.{source_lang}")), PathBuf::from(format!("{base}.{split}.{target_lang}")))
}

pub fn write_splits(splits: &Splits, prefix: &Path) -> Result<(), CorpusError> {
    for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let (s, t) = split_paths(prefix, name, &part.source_lang, &part.target_lang);
        write_parallel(part, &s, &t)?;
    }
    Ok(())
}

pub fn load_splits(prefix: &Path, source_lang: &str, target_lang: &str) -> Result<Splits, CorpusError> {
    let load = |name| {
        let (s, t) = split_paths(prefix, name, source_lang, target_lang);
        load_parallel(&s, &t)
    };
    Ok(Splits { train: load("train")?, valid: load("valid")?, test: load("test")? })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SideStats {
    pub tokens: usize,
    pub mean_len: f64,
    pub max_len: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pair_count: usize,
    pub source: SideStats,
    pub target: SideStats,
}

fn side_stats<'a>(sentences: impl Iterator<Item = &'a str>) -> SideStats {
    let mut vocab: HashMap<&str, ()> = HashMap::new();
    let (mut tokens, mut max_len, mut n) = (0usize, 0usize, 0usize);
    for s in sentences {
        let len = s
            .split_whitespace()
            .inspect(|w| {
                vocab.insert(w, ());
            })
            .count();
        tokens += len;
        max_len = max_len.max(len);
        n += 1;
    }
    SideStats { tokens, mean_len: if n == 0 { 0.0 } else { tokens as f64 / n as f64 }, max_len, vocab_size: vocab.len() }
}

pub fn stats(corpus: &ParallelCorpus) -> CorpusStats {
    CorpusStats { pair_count: corpus.len(), source: side_stats(corpus.sources()), target: side_stats(corpus.targets()) }
}
