//! Training loop, validation, learning-rate schedules, checkpoints and the
//! training event stream.
//!
//! Batches are built once per corpus by sorting pairs on length and cutting
//! buckets that fit the target-token budget; each epoch visits the buckets in
//! a seeded shuffled order. Dropout masks for step `n` come from a stream
//! keyed on `(seed, n)`, so a run resumed from a checkpoint replays exactly
//! the same randomness as an uninterrupted one.

mod checkpoint;
mod events;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Progress, CHECKPOINT_VERSION};
pub use events::{ChannelSink, Clock, EnergyProbe, EventSink, JsonlSink, NoEnergy, SystemClock, TrainingEvent, VirtualClock};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ParallelCorpus;
use crate::models::{ArchKind, Batch, ForwardCtx, ModelError, Seq2SeqModel};
use crate::numerics::{log_softmax, Graph, NumericsError, Optimizer, OptimizerKind};
use crate::rng;
use crate::subword::{SubwordModel, PAD_ID};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),
    #[error("training or validation data is empty")]
    DataEmpty,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("subword model digest {found} does not match the checkpoint's {expected}")]
    SubwordDigestMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `base · min(step^-0.5, step · warmup^-1.5)`.
    InverseSqrt,
    /// Constant, halved whenever a validation fails to improve perplexity.
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: u64,
    /// Padded target tokens per batch.
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub validation_interval: u64,
    pub checkpoint_interval: u64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Validations without a perplexity improvement before stopping.
    pub patience: u32,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self::transformer()
    }
}

impl Hyperparameters {
    pub fn transformer() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 2.0,
            schedule: LrSchedule::InverseSqrt,
            warmup_steps: 4000,
            batch_tokens: 512,
            max_steps: 20_000,
            validation_interval: 500,
            checkpoint_interval: 1000,
            label_smoothing: 0.1,
            seed: 1,
            patience: 5,
            max_grad_norm: 0.0,
        }
    }

    pub fn rnn() -> Self {
        Self { learning_rate: 1e-3, schedule: LrSchedule::Plateau, max_grad_norm: 5.0, ..Self::transformer() }
    }

    pub fn for_arch(kind: ArchKind) -> Self {
        match kind {
            ArchKind::Transformer => Self::transformer(),
            ArchKind::Rnn => Self::rnn(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::InvalidHyperparameters(m));
        let counts = [
            ("warmup_steps", self.warmup_steps),
            ("batch_tokens", self.batch_tokens as u64),
            ("max_steps", self.max_steps),
            ("validation_interval", self.validation_interval),
            ("checkpoint_interval", self.checkpoint_interval),
            ("patience", self.patience as u64),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(0.0..=0.3).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} is not in [0, 0.3]", self.label_smoothing));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad(format!("max_grad_norm {} must be finite and non-negative", self.max_grad_norm));
        }
        Ok(())
    }
}

/// Scheduled learning rate at `step` (≥ 1), before any plateau halving.
pub fn schedule_lr(hp: &Hyperparameters, step: u64) -> f64 {
    let s = step.max(1) as f64;
    match hp.schedule {
        LrSchedule::InverseSqrt => hp.learning_rate * s.powf(-0.5).min(s * (hp.warmup_steps as f64).powf(-1.5)),
        LrSchedule::Plateau => hp.learning_rate,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

pub fn encode_corpus(corpus: &ParallelCorpus, source: &SubwordModel, target: &SubwordModel) -> Vec<EncodedPair> {
    corpus.pairs.iter().map(|p| EncodedPair { source: source.encode_ids(&p.source), target: target.encode_ids(&p.target) }).collect()
}

/// Groups pair indices into batches of at most `budget` padded target tokens
/// (decoder positions, `</s>` included). Pairs are sorted by target length,
/// then source length, then index; a single over-long pair forms its own batch.
pub fn make_batches(pairs: &[EncodedPair], budget: usize, max_len: usize) -> Vec<Vec<usize>> {
    let width = |i: usize| (pairs[i].target.len() + 1).min(max_len.max(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].target.len(), pairs[i].source.len(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let w = current.iter().map(|&j| width(j)).max().unwrap_or(0).max(width(i));
        if !current.is_empty() && (current.len() + 1) * w > budget {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

const BATCH_ORDER_TAG: u64 = 0xba7c;
const DROPOUT_TAG: u64 = 0xd809;

/// Seeded visiting order of `count` batches in `epoch`.
pub fn epoch_order(count: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    rng::shuffle(&mut rng::stream(seed, &[BATCH_ORDER_TAG, epoch]), &mut order);
    order
}

fn to_batch(pairs: &[EncodedPair], idx: &[usize], max_len: usize) -> Batch {
    let refs: Vec<(&[u32], &[u32])> = idx.iter().map(|&i| (pairs[i].source.as_slice(), pairs[i].target.as_slice())).collect();
    Batch::new(&refs, max_len)
}

/// Sums over the non-padding rows of `[n, V]` logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub nll_sum: f64,
    pub correct: u64,
    pub count: u64,
}

impl TokenScores {
    /// Unsmoothed NLL and argmax accuracy; argmax ties go to the lowest id.
    pub fn from_logits(logits: &[f64], vocab: usize, targets: &[u32]) -> Self {
        let mut s = Self::default();
        for (row, &gold) in logits.chunks(vocab).zip(targets) {
            if gold == PAD_ID {
                continue;
            }
            s.nll_sum -= log_softmax(row)[gold as usize];
            s.correct += (argmax(row) == gold as usize) as u64;
            s.count += 1;
        }
        s
    }

    pub fn add(&mut self, o: &Self) {
        self.nll_sum += o.nll_sum;
        self.correct += o.correct;
        self.count += o.count;
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn mean_nll(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.nll_sum / self.count as f64
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub accuracy: f64,
    /// `exp(nll)`.
    pub ppl: f64,
    /// Mean per-token negative log-likelihood.
    pub nll: f64,
    pub tokens: u64,
}

/// Teacher-forced accuracy and perplexity over every non-padding target
/// position, `</s>` included. Label smoothing plays no part.
pub fn validate(model: &Seq2SeqModel, valid: &[EncodedPair]) -> Result<Validation, TrainingError> {
    if valid.is_empty() {
        return Err(TrainingError::DataEmpty);
    }
    let max_len = model.config.max_sequence_length;
    let mut total = TokenScores::default();
    for idx in make_batches(valid, 2048, max_len) {
        let batch = to_batch(valid, &idx, max_len);
        let mut g = Graph::inference();
        let logits = model.forward_teacher_forced(&mut g, &batch.source, &batch.target_in, &mut ForwardCtx::inference())?;
        total.add(&TokenScores::from_logits(g.value(logits).data(), model.config.target_vocab_size, &batch.target_out.ids));
    }
    let nll = total.mean_nll();
    Ok(Validation { accuracy: total.accuracy(), ppl: nll.exp(), nll, tokens: total.count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// State at the validation with the lowest perplexity.
    pub best: Option<Checkpoint>,
    pub events: Vec<TrainingEvent>,
    pub stop: StopReason,
}

/// Side channels of a training run. Checkpoints are written to
/// `checkpoint_dir` as `step-N.ckpt` every checkpoint interval, `best.ckpt`
/// on each perplexity improvement and `last.ckpt` at the end.
pub struct TrainOptions<'a> {
    pub sink: &'a mut dyn EventSink,
    pub clock: &'a dyn Clock,
    pub energy: &'a dyn EnergyProbe,
    pub checkpoint_dir: Option<&'a Path>,
}

impl<'a> TrainOptions<'a> {
    pub fn new(sink: &'a mut dyn EventSink) -> Self {
        Self { sink, clock: &SystemClock, energy: &NoEnergy, checkpoint_dir: None }
    }
}

fn check_data(model: &Seq2SeqModel, train: &[EncodedPair], valid: &[EncodedPair]) -> Result<(), TrainingError> {
    if train.is_empty() || valid.is_empty() {
        return Err(TrainingError::DataEmpty);
    }
    let c = &model.config;
    for p in train.iter().chain(valid) {
        if let Some(&id) = p.source.iter().find(|&&i| i as usize >= c.source_vocab_size) {
            return Err(ModelError::IdOutOfRange { id, vocab: c.source_vocab_size }.into());
        }
        if let Some(&id) = p.target.iter().find(|&&i| i as usize >= c.target_vocab_size) {
            return Err(ModelError::IdOutOfRange { id, vocab: c.target_vocab_size }.into());
        }
    }
    Ok(())
}

/// Trains a freshly built model for `hp.max_steps` steps.
pub fn train(
    model: Seq2SeqModel,
    train: &[EncodedPair],
    valid: &[EncodedPair],
    hp: &Hyperparameters,
    opts: &mut TrainOptions<'_>,
) -> Result<TrainOutcome, TrainingError> {
    hp.validate()?;
    let optimizer = Optimizer::new(hp.optimizer, schedule_lr(hp, 1));
    let ckpt = Checkpoint { model, optimizer: optimizer.state, hyperparameters: hp.clone(), progress: Progress::default() };
    run(ckpt, train, valid, opts)
}

/// Continues an interrupted run until `hp.max_steps` total steps. With the
/// same data and hyperparameters the result matches an uninterrupted run.
pub fn resume(
    ckpt: Checkpoint,
    train: &[EncodedPair],
    valid: &[EncodedPair],
    hp: &Hyperparameters,
    opts: &mut TrainOptions<'_>,
) -> Result<TrainOutcome, TrainingError> {
    hp.validate()?;
    run(Checkpoint { hyperparameters: hp.clone(), ..ckpt }, train, valid, opts)
}

/// Continues training `base` on new data for `hp.max_steps` further steps.
/// Parameters, optimizer moments and the step counter carry over; the data
/// cursor, early-stopping record and plateau scale start afresh. The new data
/// must be encoded with the subword models whose digests `base` records.
pub fn fine_tune(
    base: Checkpoint,
    subword_digests: (&str, &str),
    train: &[EncodedPair],
    valid: &[EncodedPair],
    hp: &Hyperparameters,
    opts: &mut TrainOptions<'_>,
) -> Result<TrainOutcome, TrainingError> {
    hp.validate()?;
    for (expected, found) in [(&base.model.source_subword_digest, subword_digests.0), (&base.model.target_subword_digest, subword_digests.1)] {
        if expected != found {
            return Err(TrainingError::SubwordDigestMismatch { expected: expected.clone(), found: found.to_string() });
        }
    }
    let step = base.progress.step;
    let mut hp = hp.clone();
    hp.max_steps += step;
    let progress = Progress { step, last_validation: base.progress.last_validation, ..Progress::default() };
    run(Checkpoint { hyperparameters: hp, progress, ..base }, train, valid, opts)
}

fn run(mut ck: Checkpoint, train: &[EncodedPair], valid: &[EncodedPair], opts: &mut TrainOptions<'_>) -> Result<TrainOutcome, TrainingError> {
    check_data(&ck.model, train, valid)?;
    let hp = ck.hyperparameters.clone();
    let max_len = ck.model.config.max_sequence_length;
    let vocab = ck.model.config.target_vocab_size;
    let batches = make_batches(train, hp.batch_tokens, max_len);
    let mut order = epoch_order(batches.len(), hp.seed, ck.progress.epoch);
    let mut optimizer = Optimizer::from_state(std::mem::replace(&mut ck.optimizer, Optimizer::new(hp.optimizer, 0.0).state));
    if optimizer.kind() != hp.optimizer {
        return Err(TrainingError::InvalidHyperparameters("optimizer kind differs from the checkpoint's".into()));
    }
    let mut events = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stop = StopReason::MaxSteps;
    let dir = opts.checkpoint_dir;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let snapshot = |ck: &Checkpoint, opt: &Optimizer| Checkpoint { optimizer: opt.state.clone(), ..ck.clone() };
    while ck.progress.step < hp.max_steps {
        let p = &mut ck.progress;
        if p.batch_cursor >= order.len() {
            p.epoch += 1;
            p.batch_cursor = 0;
            order = epoch_order(batches.len(), hp.seed, p.epoch);
        }
        let batch = to_batch(train, &batches[order[p.batch_cursor]], max_len);
        p.batch_cursor += 1;
        p.step += 1;
        let step = p.step;
        let lr = schedule_lr(&hp, step) * p.lr_scale;
        optimizer.set_learning_rate(lr);

        let mut dropout = rng::stream(hp.seed, &[DROPOUT_TAG, step]);
        let mut g = Graph::new();
        let (flat, loss) = ck.model.batch_loss(&mut g, &batch, hp.label_smoothing, &mut ForwardCtx { dropout: Some(&mut dropout) })?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(TrainingError::NonFiniteLoss { step });
        }
        let scores = TokenScores::from_logits(g.value(flat).data(), vocab, &batch.target_out.ids);
        ck.model.params.zero_grads();
        g.backward_into(loss, &mut ck.model.params)?;
        drop(g);
        if hp.max_grad_norm > 0.0 {
            ck.model.params.clip_grad_norm(hp.max_grad_norm);
        }
        optimizer.step(&mut ck.model.params)?;
        let p = &mut ck.progress;
        p.train_loss_sum += loss_value * scores.count as f64;
        p.train_correct += scores.correct;
        p.train_tokens += scores.count;

        let on_interval = step.is_multiple_of(hp.validation_interval);
        if on_interval || step == hp.max_steps {
            let v = validate(&ck.model, valid)?;
            let p = &mut ck.progress;
            let event = TrainingEvent {
                timestamp: opts.clock.now(),
                step,
                epoch: p.epoch,
                train_loss: if p.train_tokens == 0 { 0.0 } else { p.train_loss_sum / p.train_tokens as f64 },
                train_accuracy: if p.train_tokens == 0 { 0.0 } else { p.train_correct as f64 / p.train_tokens as f64 },
                valid_accuracy: v.accuracy,
                valid_ppl: v.ppl,
                valid_nll: v.nll,
                learning_rate: lr,
                energy_kwh: opts.energy.kwh(),
            };
            p.last_validation = Some(v);
            let improved = p.best_ppl.is_none_or(|b| v.ppl < b);
            // Only interval validations drive early stopping and the plateau
            // schedule; the extra one at `max_steps` must not change the
            // trajectory of a run that is later resumed.
            if on_interval {
                (p.train_loss_sum, p.train_correct, p.train_tokens) = (0.0, 0, 0);
                if improved {
                    p.best_ppl = Some(v.ppl);
                    p.bad_validations = 0;
                } else {
                    p.bad_validations += 1;
                    if hp.schedule == LrSchedule::Plateau {
                        p.lr_scale *= 0.5;
                    }
                }
            }
            opts.sink.publish(&event)?;
            events.push(event);
            if improved {
                let b = snapshot(&ck, &optimizer);
                if let Some(d) = dir {
                    save_checkpoint(&b, &d.join("best.ckpt"))?;
                }
                best = Some(b);
            }
            if on_interval && ck.progress.bad_validations >= hp.patience {
                stop = StopReason::EarlyStop;
            }
        }
        if step.is_multiple_of(hp.checkpoint_interval) {
            if let Some(d) = dir {
                save_checkpoint(&snapshot(&ck, &optimizer), &d.join(format!("step-{step}.ckpt")))?;
            }
        }
        if stop == StopReason::EarlyStop {
            break;
        }
    }
    ck.optimizer = optimizer.state;
    if let Some(d) = dir {
        save_checkpoint(&ck, &d.join("last.ckpt"))?;
    }
    Ok(TrainOutcome { last: ck, best, events, stop })
}
