//! Sequence-to-sequence architectures and decoding.
//!
//! Two architectures share one parameter-table representation:
//!
//! * **Transformer**: scaled embeddings plus sinusoidal positions, pre-norm
//!   residual blocks, causal decoder self-attention and cross-attention.
//! * **RNN**: a bidirectional GRU encoder and a GRU decoder with bilinear
//!   ("general") attention and input feeding.
//!
//! Source sequences are terminated with `</s>`; decoder inputs start with
//! `<s>` and outputs end with `</s>`. Padding uses id 0 and is masked out of
//! attention and loss.

mod decode;
mod rnn;
mod transformer;

pub use decode::{beam_search, greedy_decode, translate_corpus, DecodeModel, DecodeSession, DecodeSettings, Ensemble, Translation};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};
use crate::rng;
use crate::subword::{SubwordError, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("id {id} is outside a vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("batch shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ensemble members disagree on the target vocabulary")]
    VocabMismatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Rnn,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub kind: ArchKind,
    pub layer_count: usize,
    pub model_width: usize,
    pub head_count: usize,
    pub feedforward_width: usize,
    pub dropout_rate: f64,
    pub max_sequence_length: usize,
    /// Zero in a run config: filled in from the trained subword models.
    #[serde(default)]
    pub source_vocab_size: usize,
    #[serde(default)]
    pub target_vocab_size: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
}

impl ArchitectureConfig {
    /// Declared defaults for a small Transformer.
    pub fn transformer(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        Self {
            kind: ArchKind::Transformer,
            layer_count: 2,
            model_width: 256,
            head_count: 8,
            feedforward_width: 1024,
            dropout_rate: 0.1,
            max_sequence_length: 128,
            source_vocab_size,
            target_vocab_size,
            tied_embeddings: false,
        }
    }

    pub fn rnn(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        Self { kind: ArchKind::Rnn, head_count: 1, ..Self::transformer(source_vocab_size, target_vocab_size) }
    }

    pub fn head_width(&self) -> usize {
        self.model_width / self.head_count.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("layer_count", self.layer_count),
            ("model_width", self.model_width),
            ("head_count", self.head_count),
            ("feedforward_width", self.feedforward_width),
            ("max_sequence_length", self.max_sequence_length),
            ("source_vocab_size", self.source_vocab_size),
            ("target_vocab_size", self.target_vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.model_width.is_multiple_of(self.head_count) {
            return Err(ModelError::InvalidConfig(format!("model_width {} is not divisible by head_count {}", self.model_width, self.head_count)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!("dropout_rate {} is not in [0, 1)", self.dropout_rate)));
        }
        if self.source_vocab_size <= EOS_ID as usize || self.target_vocab_size <= EOS_ID as usize {
            return Err(ModelError::InvalidConfig("vocabularies must include the four special ids".into()));
        }
        Ok(())
    }
}

/// Right-padded id matrix, row-major `[rows, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub width: usize,
}

impl PaddedIds {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD_ID; rows.len() * width];
        for (r, row) in rows.iter().enumerate() {
            ids[r * width..r * width + row.len()].copy_from_slice(row);
        }
        Self { ids, rows: rows.len(), width }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.width..(r + 1) * self.width]
    }

    pub fn column(&self, t: usize) -> Vec<u32> {
        (0..self.rows).map(|r| self.ids[r * self.width + t]).collect()
    }

    /// Non-padding token count.
    pub fn tokens(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD_ID).count()
    }
}

/// A teacher-forcing batch built from (source ids, target ids) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source: PaddedIds,
    pub target_in: PaddedIds,
    pub target_out: PaddedIds,
}

impl Batch {
    /// Appends `</s>` to sources, prefixes targets with `<s>` for the decoder
    /// input and appends `</s>` for the output. Sequences are cut so that
    /// neither side exceeds `max_len` positions.
    pub fn new(pairs: &[(&[u32], &[u32])], max_len: usize) -> Self {
        let keep = max_len.max(1) - 1;
        let src: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| with_eos(s, keep)).collect();
        let tin: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| std::iter::once(BOS_ID).chain(t.iter().take(keep).copied()).collect()).collect();
        let tout: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| with_eos(t, keep)).collect();
        Self { source: PaddedIds::from_rows(&src), target_in: PaddedIds::from_rows(&tin), target_out: PaddedIds::from_rows(&tout) }
    }

    pub fn rows(&self) -> usize {
        self.source.rows
    }
}

pub(crate) fn with_eos(ids: &[u32], keep: usize) -> Vec<u32> {
    ids.iter().take(keep).copied().chain(std::iter::once(EOS_ID)).collect()
}

/// Parameters plus architecture, with the digests of the subword models the
/// vocabularies came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ArchitectureConfig,
    pub params: ParamStore,
    pub source_subword_digest: String,
    pub target_subword_digest: String,
}

/// Dropout randomness for one forward pass; `None` disables dropout.
pub struct ForwardCtx<'a> {
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

impl ForwardCtx<'_> {
    pub fn inference() -> Self {
        ForwardCtx { dropout: None }
    }

    pub(crate) fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var, NumericsError> {
        match self.dropout.as_deref_mut() {
            Some(r) => g.dropout(x, rate, r),
            None => Ok(x),
        }
    }
}

impl Seq2SeqModel {
    /// Initialises all parameters deterministically from `seed`.
    pub fn build(config: ArchitectureConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0x1417]);
        let mut params = ParamStore::new();
        match config.kind {
            ArchKind::Transformer => transformer::init(&config, &mut params, &mut r),
            ArchKind::Rnn => rnn::init(&config, &mut params, &mut r),
        }
        Ok(Self { config, params, source_subword_digest: String::new(), target_subword_digest: String::new() })
    }

    pub fn with_subword_digests(mut self, source: impl Into<String>, target: impl Into<String>) -> Self {
        self.source_subword_digest = source.into();
        self.target_subword_digest = target.into();
        self
    }

    fn check_ids(ids: &PaddedIds, vocab: usize) -> Result<(), ModelError> {
        match ids.ids.iter().find(|&&i| i as usize >= vocab) {
            Some(&id) => Err(ModelError::IdOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Teacher-forced logits `[rows, target_width, target_vocab]`.
    pub fn forward_teacher_forced(&self, g: &mut Graph, source: &PaddedIds, target_in: &PaddedIds, ctx: &mut ForwardCtx<'_>) -> Result<Var, ModelError> {
        if source.rows != target_in.rows {
            return Err(ModelError::ShapeMismatch(format!("{} source rows vs {} target rows", source.rows, target_in.rows)));
        }
        Self::check_ids(source, self.config.source_vocab_size)?;
        Self::check_ids(target_in, self.config.target_vocab_size)?;
        let limit = self.config.max_sequence_length;
        if source.width > limit || target_in.width > limit {
            return Err(ModelError::ShapeMismatch(format!("sequence longer than max_sequence_length {limit}")));
        }
        match self.config.kind {
            ArchKind::Transformer => transformer::forward(self, g, source, target_in, ctx),
            ArchKind::Rnn => rnn::forward(self, g, source, target_in, ctx),
        }
    }

    /// Teacher-forced loss on a batch: mean label-smoothed cross entropy over
    /// non-padding target positions.
    pub fn batch_loss(&self, g: &mut Graph, batch: &Batch, smoothing: f64, ctx: &mut ForwardCtx<'_>) -> Result<(Var, Var), ModelError> {
        let logits = self.forward_teacher_forced(g, &batch.source, &batch.target_in, ctx)?;
        let v = self.config.target_vocab_size;
        let flat = g.reshape(logits, &[batch.target_out.rows * batch.target_out.width, v])?;
        Self::check_ids(&batch.target_out, v)?;
        let loss = g.cross_entropy(flat, &batch.target_out.ids, smoothing, Some(PAD_ID))?;
        Ok((flat, loss))
    }
}

/// Additive attention mask entries: 0 where allowed, this where blocked.
pub(crate) const MASKED: f64 = -1e9;

/// Fixed sinusoidal position table `[len, width]`.
pub(crate) fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 / rate;
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, width], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ArchKind) -> ArchitectureConfig {
        ArchitectureConfig {
            kind,
            layer_count: 2,
            model_width: 8,
            head_count: 2,
            feedforward_width: 16,
            dropout_rate: 0.0,
            max_sequence_length: 16,
            source_vocab_size: 11,
            target_vocab_size: 9,
            tied_embeddings: false,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ArchitectureConfig::transformer(100, 100);
        c.model_width = 64;
        c.head_count = 4;
        assert!(c.validate().is_ok());
        assert_eq!(c.head_width(), 16);
        c.model_width = 65;
        assert!(matches!(Seq2SeqModel::build(c.clone(), 0), Err(ModelError::InvalidConfig(_))));
        c.model_width = 64;
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        c.dropout_rate = 0.0;
        c.layer_count = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        for kind in [ArchKind::Transformer, ArchKind::Rnn] {
            let a = Seq2SeqModel::build(tiny(kind), 5).unwrap();
            let b = Seq2SeqModel::build(tiny(kind), 5).unwrap();
            let c = Seq2SeqModel::build(tiny(kind), 6).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.params, c.params);
        }
    }

    #[test]
    fn logits_shape_and_range_checks() {
        for kind in [ArchKind::Transformer, ArchKind::Rnn] {
            let m = Seq2SeqModel::build(tiny(kind), 1).unwrap();
            let batch = Batch::new(&[(&[4, 5, 6][..], &[4, 5][..]), (&[7][..], &[8, 4, 4][..])], 16);
            let mut g = Graph::new();
            let logits = m.forward_teacher_forced(&mut g, &batch.source, &batch.target_in, &mut ForwardCtx::inference()).unwrap();
            assert_eq!(g.shape(logits), &[2, 4, 9]);
            let bad = PaddedIds::from_rows(&[vec![99]]);
            let r = m.forward_teacher_forced(&mut g, &bad, &PaddedIds::from_rows(&[vec![2]]), &mut ForwardCtx::inference());
            assert!(matches!(r, Err(ModelError::IdOutOfRange { id: 99, .. })));
            let r = m.forward_teacher_forced(&mut g, &batch.source, &PaddedIds::from_rows(&[vec![2]]), &mut ForwardCtx::inference());
            assert!(matches!(r, Err(ModelError::ShapeMismatch(_))));
        }
    }

    #[test]
    fn batch_layout() {
        let b = Batch::new(&[(&[5, 6][..], &[7][..])], 10);
        assert_eq!(b.source.row(0), &[5, 6, EOS_ID]);
        assert_eq!(b.target_in.row(0), &[BOS_ID, 7]);
        assert_eq!(b.target_out.row(0), &[7, EOS_ID]);
        let cut = Batch::new(&[(&[5, 6, 7, 8][..], &[7, 7, 7, 7][..])], 3);
        assert_eq!(cut.source.width, 3);
        assert_eq!(cut.target_in.width, 3);
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(10, 6);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.data()[0], 0.0);
        assert_eq!(p.data()[1], 1.0);
    }
}
