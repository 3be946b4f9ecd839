//! Subword segmentation: byte-pair-encoding and unigram language models.
//!
//! Both model kinds operate on *marked* text: every whitespace-separated word
//! is prefixed with the boundary marker `▁` (U+2581) and the words are
//! concatenated, so `"hello world"` becomes `"▁hello▁world"`. Because the
//! marker records where spaces were, decoding can restore the sentence
//! exactly (runs of whitespace collapse to a single space).
//!
//! Ids `0..4` are reserved for `<pad>`, `<unk>`, `<s>` and `</s>`; every
//! character seen during training is a piece of its own, so any sentence over
//! the training alphabet round-trips through [`SubwordModel::encode`] and
//! [`SubwordModel::decode`].

mod bpe;
mod unigram;

pub use bpe::{learn_merges, train_bpe, Merge};
pub use unigram::{train_unigram, UnigramTrainer, WordLattice};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MARKER: char = '\u{2581}';
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const SPECIAL_PIECES: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];
/// What an unknown piece decodes to.
pub const UNK_PLACEHOLDER: &str = "\u{2047}";

const FILE_MAGIC: &str = "#nmtbench-subword v1";

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("vocabulary size {requested} is below the minimum of {minimum} (characters plus specials)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("no training text")]
    EmptyCorpus,
    #[error("piece id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("malformed model file, line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bpe,
    Unigram,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Bpe => "bpe",
            ModelKind::Unigram => "unigram",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bpe" => Ok(ModelKind::Bpe),
            "unigram" => Ok(ModelKind::Unigram),
            other => Err(format!("unknown subword model kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub text: String,
    /// Unigram models only; `None` for specials and for BPE pieces.
    pub log_prob: Option<f64>,
}

/// Piece ids with character spans into the marked input.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segmentation {
    pub pieces: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SubwordModel {
    kind: ModelKind,
    pieces: Vec<Piece>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    max_piece_chars: usize,
    unk_log_prob: f64,
}

impl PartialEq for SubwordModel {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.merges == other.merges
            && self.pieces.len() == other.pieces.len()
            && self.pieces.iter().zip(&other.pieces).all(|(a, b)| a.text == b.text && a.log_prob.map(f64::to_bits) == b.log_prob.map(f64::to_bits))
    }
}

/// Marks a sentence: `"ab c"` → `"▁ab▁c"`.
pub fn mark(sentence: &str) -> String {
    let mut out = String::with_capacity(sentence.len() + 8);
    for word in sentence.split_whitespace() {
        out.push(MARKER);
        out.push_str(word);
    }
    out
}

/// Marked words of a sentence, each starting with the marker.
pub(crate) fn marked_words(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence.split_whitespace().map(|w| {
        let mut s = String::with_capacity(w.len() + 3);
        s.push(MARKER);
        s.push_str(w);
        s
    })
}

/// Marked-word frequency table, sorted by word for determinism.
pub(crate) fn word_frequencies<'a>(text: impl IntoIterator<Item = &'a str>) -> Vec<(String, u64)> {
    let mut freq: HashMap<String, u64> = HashMap::new();
    for sentence in text {
        for w in marked_words(sentence) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut out: Vec<_> = freq.into_iter().collect();
    out.sort_unstable();
    out
}

/// Characters ordered by descending frequency, then by code point.
pub(crate) fn character_inventory(words: &[(String, u64)]) -> Vec<char> {
    let mut freq: HashMap<char, u64> = HashMap::new();
    for (w, f) in words {
        for c in w.chars() {
            *freq.entry(c).or_default() += f;
        }
    }
    let mut chars: Vec<_> = freq.into_iter().collect();
    chars.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    chars.into_iter().map(|(c, _)| c).collect()
}

impl SubwordModel {
    pub(crate) fn from_parts(kind: ModelKind, normal: Vec<Piece>, merges: Vec<(String, String)>) -> Self {
        let pieces: Vec<Piece> = SPECIAL_PIECES.iter().map(|s| Piece { text: s.to_string(), log_prob: None }).chain(normal).collect();
        let index = pieces.iter().enumerate().map(|(i, p)| (p.text.clone(), i as u32)).collect();
        let merge_rank = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        let max_piece_chars = pieces[4..].iter().map(|p| p.text.chars().count()).max().unwrap_or(1);
        let min_lp = pieces.iter().filter_map(|p| p.log_prob).fold(0.0f64, f64::min);
        Self { kind, pieces, index, merges, merge_rank, max_piece_chars, unk_log_prob: min_lp - 10.0 }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece_id(&self, text: &str) -> Option<u32> {
        self.index.get(text).copied()
    }

    pub fn piece_text(&self, id: u32) -> Result<&str, SubwordError> {
        self.pieces.get(id as usize).map(|p| p.text.as_str()).ok_or(SubwordError::UnknownId(id))
    }

    pub fn log_prob(&self, id: u32) -> Option<f64> {
        self.pieces.get(id as usize).and_then(|p| p.log_prob)
    }

    /// Log-probability assigned to an unknown character during unigram search.
    pub fn unk_log_prob(&self) -> f64 {
        self.unk_log_prob
    }

    pub fn encode(&self, sentence: &str) -> Segmentation {
        let mut seg = Segmentation::default();
        let mut base = 0;
        for word in marked_words(sentence) {
            let chars: Vec<char> = word.chars().collect();
            let spans = match self.kind {
                ModelKind::Bpe => self.bpe_word(&chars),
                ModelKind::Unigram => self.viterbi_word(&chars),
            };
            for (id, (a, b)) in spans {
                seg.pieces.push(id);
                seg.offsets.push((base + a, base + b));
            }
            base += chars.len();
        }
        seg
    }

    pub fn encode_ids(&self, sentence: &str) -> Vec<u32> {
        self.encode(sentence).pieces
    }

    fn bpe_word(&self, chars: &[char]) -> Vec<(u32, (usize, usize))> {
        // Symbols are (text, known, start, end); unknown characters never merge.
        let mut syms: Vec<(String, bool, usize, usize)> = chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let t = c.to_string();
                let known = self.index.contains_key(&t);
                (t, known, i, i + 1)
            })
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..syms.len().saturating_sub(1) {
                if !(syms[i].1 && syms[i + 1].1) {
                    continue;
                }
                let key = (syms[i].0.clone(), syms[i + 1].0.clone());
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i].1 && syms[i + 1].1 && &syms[i].0 == left && &syms[i + 1].0 == right {
                    let text = format!("{left}{right}");
                    merged.push((text, true, syms[i].2, syms[i + 1].3));
                    i += 2;
                } else {
                    merged.push(syms[i].clone());
                    i += 1;
                }
            }
            syms = merged;
        }
        syms.into_iter()
            .map(|(t, known, a, b)| {
                let id = if known { self.index.get(&t).copied().unwrap_or(UNK_ID) } else { UNK_ID };
                (id, (a, b))
            })
            .collect()
    }

    fn viterbi_word(&self, chars: &[char]) -> Vec<(u32, (usize, usize))> {
        let n = chars.len();
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back: Vec<(usize, u32)> = vec![(0, UNK_ID); n + 1];
        best[0] = 0.0;
        let mut buf = String::new();
        for start in 0..n {
            if best[start] == f64::NEG_INFINITY {
                continue;
            }
            buf.clear();
            let mut found_single = false;
            for end in start + 1..=n.min(start + self.max_piece_chars) {
                buf.push(chars[end - 1]);
                if let Some(&id) = self.index.get(buf.as_str()) {
                    let Some(lp) = self.pieces[id as usize].log_prob else { continue };
                    if end == start + 1 {
                        found_single = true;
                    }
                    let score = best[start] + lp;
                    if score > best[end] {
                        best[end] = score;
                        back[end] = (start, id);
                    }
                }
            }
            if !found_single {
                let score = best[start] + self.unk_log_prob;
                if score > best[start + 1] {
                    best[start + 1] = score;
                    back[start + 1] = (start, UNK_ID);
                }
            }
        }
        let mut out = Vec::new();
        let mut end = n;
        while end > 0 {
            let (start, id) = back[end];
            out.push((id, (start, end)));
            end = start;
        }
        out.reverse();
        out
    }

    /// Sum of piece log-probabilities of a segmentation (unigram models).
    pub fn segmentation_log_prob(&self, pieces: &[u32]) -> f64 {
        pieces.iter().map(|&id| if id == UNK_ID { self.unk_log_prob } else { self.log_prob(id).unwrap_or(f64::NEG_INFINITY) }).sum()
    }

    /// Concatenates pieces, turning markers back into spaces. Specials other
    /// than `<unk>` render as nothing; `<unk>` renders as `⁇`.
    pub fn decode(&self, ids: &[u32]) -> Result<String, SubwordError> {
        let mut out = String::new();
        for &id in ids {
            let text = self.piece_text(id)?;
            match id {
                UNK_ID => out.push_str(UNK_PLACEHOLDER),
                PAD_ID | BOS_ID | EOS_ID => {}
                _ => out.extend(text.chars().map(|c| if c == MARKER { ' ' } else { c })),
            }
        }
        Ok(out.strip_prefix(' ').map(str::to_string).unwrap_or(out))
    }

    /// Renders the versioned text model file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{FILE_MAGIC}").unwrap();
        writeln!(s, "kind={}\tsize={}\tmarker={}", self.kind.as_str(), self.pieces.len(), MARKER).unwrap();
        for (i, p) in self.pieces.iter().enumerate() {
            let lp = p.log_prob.map(|v| format!("{v:?}")).unwrap_or_default();
            writeln!(s, "{i}\t{}\t{lp}", escape(&p.text)).unwrap();
        }
        writeln!(s, "merges={}", self.merges.len()).unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "{}\t{}", escape(a), escape(b)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SubwordError> {
        let bad = |line: usize, reason: &str| SubwordError::Format { line, reason: reason.to_string() };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, magic) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        if magic != FILE_MAGIC {
            return Err(bad(n, "unrecognised header"));
        }
        let (n, header) = lines.next().ok_or_else(|| bad(2, "missing header"))?;
        let mut kind = None;
        let mut size = None;
        for field in header.split('\t') {
            match field.split_once('=') {
                Some(("kind", v)) => kind = Some(v.parse::<ModelKind>().map_err(|e| bad(n, &e))?),
                Some(("size", v)) => size = Some(v.parse::<usize>().map_err(|_| bad(n, "bad size"))?),
                Some(("marker", v)) if v == MARKER.to_string() => {}
                _ => return Err(bad(n, "bad header field")),
            }
        }
        let (kind, size) = (kind.ok_or_else(|| bad(n, "missing kind"))?, size.ok_or_else(|| bad(n, "missing size"))?);
        if size < SPECIAL_PIECES.len() {
            return Err(bad(n, "vocabulary smaller than the special pieces"));
        }
        let mut pieces = Vec::with_capacity(size);
        for expected in 0..size {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "truncated piece table"))?;
            let mut cols = line.split('\t');
            let id: usize = cols.next().and_then(|c| c.parse().ok()).ok_or_else(|| bad(n, "bad id"))?;
            if id != expected {
                return Err(bad(n, "ids are not dense"));
            }
            let piece = unescape(cols.next().ok_or_else(|| bad(n, "missing piece"))?).ok_or_else(|| bad(n, "bad escape"))?;
            let lp = match cols.next() {
                Some("") | None => None,
                Some(v) => Some(v.parse::<f64>().map_err(|_| bad(n, "bad log-prob"))?),
            };
            if SPECIAL_PIECES.get(expected).is_some_and(|&s| piece != s) {
                return Err(bad(n, "special pieces must occupy ids 0..4"));
            }
            pieces.push(Piece { text: piece, log_prob: lp });
        }
        let (n, mline) = lines.next().ok_or_else(|| bad(0, "missing merge count"))?;
        let count: usize = mline.strip_prefix("merges=").and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, "bad merge count"))?;
        let mut merges = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "truncated merge list"))?;
            let (a, b) = line.split_once('\t').ok_or_else(|| bad(n, "bad merge"))?;
            merges.push((unescape(a).ok_or_else(|| bad(n, "bad escape"))?, unescape(b).ok_or_else(|| bad(n, "bad escape"))?));
        }
        if let Some((n, _)) = lines.next() {
            return Err(bad(n, "trailing content"));
        }
        Ok(Self::from_parts(kind, pieces.split_off(SPECIAL_PIECES.len()), merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the model file text, hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(out)
}

/// Trains the requested model kind.
pub fn train<'a>(kind: ModelKind, text: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<SubwordModel, SubwordError> {
    match kind {
        ModelKind::Bpe => train_bpe(text, vocab_size),
        ModelKind::Unigram => train_unigram(text, vocab_size),
    }
}
