use serde::{Deserialize, Serialize};

use super::{rnn, transformer, with_eos, ArchKind, ForwardCtx, ModelError, PaddedIds, Seq2SeqModel};
use crate::numerics::{softmax_rows, Graph, Tensor};
use crate::subword::{SubwordModel, BOS_ID, EOS_ID, PAD_ID};

/// A model that can score next tokens given a source sentence.
pub trait DecodeModel {
    fn target_vocab_size(&self) -> usize;

    /// Digest of the target subword model; ensemble members must agree.
    fn target_digest(&self) -> &str;

    /// Longest decoder input the model accepts, `<s>` included.
    fn max_target_length(&self) -> usize {
        usize::MAX
    }

    /// Encodes `source` (piece ids without `</s>`) once for repeated queries.
    fn start(&self, source: &[u32]) -> Result<Box<dyn DecodeSession + '_>, ModelError>;
}

pub trait DecodeSession {
    /// Next-token distributions, one per prefix. Every prefix begins with `<s>`.
    fn next_probs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub beam_size: usize,
    pub alpha: f64,
    /// Generated tokens per hypothesis, `</s>` included.
    pub max_length: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { beam_size: 5, alpha: 0.6, max_length: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    /// Generated ids, ending in `</s>` when `finished`.
    pub ids: Vec<u32>,
    pub text: String,
    pub log_prob: f64,
    /// `log_prob / len^alpha` with `len = ids.len()`.
    pub score: f64,
    pub step_log_probs: Vec<f64>,
    pub finished: bool,
}

impl Translation {
    fn new(ids: Vec<u32>, step_log_probs: Vec<f64>, alpha: f64) -> Self {
        let log_prob: f64 = step_log_probs.iter().sum();
        let finished = ids.last() == Some(&EOS_ID);
        Self { score: normalized(log_prob, ids.len(), alpha), ids, text: String::new(), log_prob, step_log_probs, finished }
    }

    /// Ids with the trailing `</s>` removed.
    pub fn content(&self) -> &[u32] {
        match self.ids.split_last() {
            Some((&EOS_ID, rest)) => rest,
            _ => &self.ids,
        }
    }
}

pub(crate) fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if len == 0 {
        log_prob
    } else {
        log_prob / (len as f64).powf(alpha)
    }
}

/// Decode-time ensemble: the next-token distribution is the arithmetic mean
/// of the members' distributions.
pub struct Ensemble<'a> {
    members: Vec<&'a dyn DecodeModel>,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a dyn DecodeModel>) -> Result<Self, ModelError> {
        let first = members.first().ok_or_else(|| ModelError::InvalidConfig("an ensemble needs at least one model".into()))?;
        let ok = members.iter().all(|m| m.target_vocab_size() == first.target_vocab_size() && m.target_digest() == first.target_digest());
        if !ok {
            return Err(ModelError::VocabMismatch);
        }
        Ok(Self { members })
    }
}

impl DecodeModel for Ensemble<'_> {
    fn target_vocab_size(&self) -> usize {
        self.members[0].target_vocab_size()
    }

    fn target_digest(&self) -> &str {
        self.members[0].target_digest()
    }

    fn max_target_length(&self) -> usize {
        self.members.iter().map(|m| m.max_target_length()).min().unwrap_or(usize::MAX)
    }

    fn start(&self, source: &[u32]) -> Result<Box<dyn DecodeSession + '_>, ModelError> {
        if self.members.len() == 1 {
            return self.members[0].start(source);
        }
        let sessions = self.members.iter().map(|m| m.start(source)).collect::<Result<_, _>>()?;
        Ok(Box::new(EnsembleSession { sessions }))
    }
}

struct EnsembleSession<'a> {
    sessions: Vec<Box<dyn DecodeSession + 'a>>,
}

impl DecodeSession for EnsembleSession<'_> {
    fn next_probs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError> {
        // Running mean: identical members reproduce the single-model
        // distribution exactly.
        let mut mean: Vec<Vec<f64>> = Vec::new();
        for (i, s) in self.sessions.iter_mut().enumerate() {
            let p = s.next_probs(prefixes)?;
            if i == 0 {
                mean = p;
                continue;
            }
            let n = (i + 1) as f64;
            mean.iter_mut().flatten().zip(p.iter().flatten()).for_each(|(m, x)| *m += (x - *m) / n);
        }
        Ok(mean)
    }
}

/// Cached encoder output for one source sentence.
struct ModelSession<'a> {
    model: &'a Seq2SeqModel,
    /// Encoder states `[s, d]`, then (RNN only) initial decoder states `[1, d]`.
    cached: Vec<Tensor>,
    src_pad: Vec<bool>,
    src_width: usize,
}

fn tile(t: &Tensor, k: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] *= k;
    let data = (0..k).flat_map(|_| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("shape")
}

impl DecodeModel for Seq2SeqModel {
    fn target_vocab_size(&self) -> usize {
        self.config.target_vocab_size
    }

    fn target_digest(&self) -> &str {
        &self.target_subword_digest
    }

    fn max_target_length(&self) -> usize {
        self.config.max_sequence_length
    }

    fn start(&self, source: &[u32]) -> Result<Box<dyn DecodeSession + '_>, ModelError> {
        let src = PaddedIds::from_rows(&[with_eos(source, self.config.max_sequence_length - 1)]);
        Self::check_ids(&src, self.config.source_vocab_size)?;
        let mut g = Graph::inference();
        let mut ctx = ForwardCtx::inference();
        let cached = match self.config.kind {
            ArchKind::Transformer => {
                let memory = transformer::encode(self, &mut g, &src, &mut ctx)?;
                vec![g.value(memory).clone()]
            }
            ArchKind::Rnn => {
                let (memory, init) = rnn::encode(self, &mut g, &src, &mut ctx)?;
                std::iter::once(memory).chain(init).map(|v| g.value(v).clone()).collect()
            }
        };
        Ok(Box::new(ModelSession { model: self, cached, src_pad: vec![false; src.width], src_width: src.width }))
    }
}

impl DecodeSession for ModelSession<'_> {
    fn next_probs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let m = self.model;
        let b = prefixes.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let tgt = PaddedIds::from_rows(&prefixes.iter().map(|p| p.to_vec()).collect::<Vec<_>>());
        if tgt.width > m.config.max_sequence_length {
            return Err(ModelError::ShapeMismatch(format!("prefix longer than max_sequence_length {}", m.config.max_sequence_length)));
        }
        Seq2SeqModel::check_ids(&tgt, m.config.target_vocab_size)?;
        let mut g = Graph::inference();
        let mut ctx = ForwardCtx::inference();
        let vars: Vec<_> = self.cached.iter().map(|t| g.constant(tile(t, b))).collect();
        let pad: Vec<bool> = (0..b).flat_map(|_| self.src_pad.iter().copied()).collect();
        let logits = match m.config.kind {
            ArchKind::Transformer => transformer::decode(m, &mut g, vars[0], &pad, self.src_width, &tgt, &mut ctx)?,
            ArchKind::Rnn => rnn::decode(m, &mut g, vars[0], &vars[1..], &pad, self.src_width, &tgt, &mut ctx)?,
        };
        let v = m.config.target_vocab_size;
        let data = g.value(logits).data();
        let mut rows = Vec::with_capacity(b * v);
        for (r, p) in prefixes.iter().enumerate() {
            let at = (r * tgt.width + p.len() - 1) * v;
            rows.extend_from_slice(&data[at..at + v]);
        }
        Ok(softmax_rows(&rows, v).chunks(v).map(<[f64]>::to_vec).collect())
    }
}

fn step_limit(model: &dyn DecodeModel, settings: &DecodeSettings) -> usize {
    settings.max_length.min(model.max_target_length())
}

fn candidate(token: usize) -> bool {
    token != PAD_ID as usize && token != BOS_ID as usize
}

/// Argmax decoding; ties go to the lowest id. `<pad>` and `<s>` are never produced.
pub fn greedy_decode(model: &dyn DecodeModel, source: &[u32], settings: &DecodeSettings) -> Result<Translation, ModelError> {
    let mut session = model.start(source)?;
    let mut prefix = vec![BOS_ID];
    let mut steps = Vec::new();
    let limit = step_limit(model, settings);
    while steps.len() < limit {
        let probs = session.next_probs(&[&prefix])?.remove(0);
        let mut best = None::<(usize, f64)>;
        for (tok, &p) in probs.iter().enumerate() {
            if candidate(tok) && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((tok, p));
            }
        }
        let (tok, p) = best.ok_or_else(|| ModelError::InvalidConfig("target vocabulary has no candidate tokens".into()))?;
        prefix.push(tok as u32);
        steps.push(p.ln());
        if tok == EOS_ID as usize {
            break;
        }
    }
    Ok(Translation::new(prefix.split_off(1), steps, settings.alpha))
}

struct Hyp {
    ids: Vec<u32>,
    steps: Vec<f64>,
    log_prob: f64,
}

/// Beam search over `model` (which may be an [`Ensemble`]). At each step the
/// `beam_size − finished` best extensions by total log-prob survive; those
/// ending in `</s>` retire. Returns up to `beam_size` hypotheses ordered by
/// length-normalized score, with unfinished partials filling in when fewer
/// than `beam_size` hypotheses finished within `max_length`.
pub fn beam_search(model: &dyn DecodeModel, source: &[u32], settings: &DecodeSettings) -> Result<Vec<Translation>, ModelError> {
    if settings.beam_size == 0 {
        return Err(ModelError::InvalidConfig("beam_size must be at least 1".into()));
    }
    let mut session = model.start(source)?;
    let mut live = vec![Hyp { ids: Vec::new(), steps: Vec::new(), log_prob: 0.0 }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..step_limit(model, settings) {
        let room = settings.beam_size - done.len();
        if live.is_empty() || room == 0 {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| std::iter::once(BOS_ID).chain(h.ids.iter().copied()).collect()).collect();
        let refs: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let probs = session.next_probs(&refs)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, (h, row)) in live.iter().zip(&probs).enumerate() {
            for (tok, &p) in row.iter().enumerate() {
                if candidate(tok) {
                    cands.push((h.log_prob + p.ln(), hi, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(room);
        for &(lp, hi, tok) in cands.iter().take(room) {
            let parent = &live[hi];
            let step = probs[hi][tok].ln();
            let h = Hyp {
                ids: parent.ids.iter().copied().chain(std::iter::once(tok as u32)).collect(),
                steps: parent.steps.iter().copied().chain(std::iter::once(step)).collect(),
                log_prob: lp,
            };
            if tok == EOS_ID as usize {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    let mut out: Vec<Translation> = done.into_iter().chain(live).map(|h| Translation::new(h.ids, h.steps, settings.alpha)).collect();
    // Finished hypotheses outrank partials; within each group, by score.
    out.sort_by(|a, b| b.finished.cmp(&a.finished).then(b.score.total_cmp(&a.score)));
    out.truncate(settings.beam_size);
    Ok(out)
}

/// Encodes, beam-searches and detokenizes each sentence in order.
pub fn translate_corpus(
    model: &dyn DecodeModel,
    source_subword: &SubwordModel,
    target_subword: &SubwordModel,
    sentences: &[String],
    settings: &DecodeSettings,
) -> Result<Vec<Translation>, ModelError> {
    sentences
        .iter()
        .map(|s| {
            let ids = source_subword.encode_ids(s);
            let mut best = beam_search(model, &ids, settings)?.into_iter().next().expect("beam_size ≥ 1 yields a hypothesis");
            best.text = target_subword.decode(best.content())?;
            Ok(best)
        })
        .collect()
}
