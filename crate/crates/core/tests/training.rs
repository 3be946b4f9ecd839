use std::sync::mpsc::sync_channel;

use nmtbench::models::{ArchKind, ArchitectureConfig, Seq2SeqModel};
use nmtbench::rng;
use nmtbench::training::{
    fine_tune, load_checkpoint, resume, save_checkpoint, train, validate, ChannelSink, Checkpoint, EncodedPair, EnergyProbe, Hyperparameters, JsonlSink,
    LrSchedule, StopReason, TokenScores, TrainOptions, TrainingError, TrainingEvent, VirtualClock, CHECKPOINT_VERSION,
};

fn config(kind: ArchKind) -> ArchitectureConfig {
    ArchitectureConfig {
        kind,
        layer_count: 1,
        model_width: 16,
        head_count: 2,
        feedforward_width: 32,
        dropout_rate: 0.1,
        max_sequence_length: 16,
        source_vocab_size: 12,
        target_vocab_size: 12,
        tied_embeddings: false,
    }
}

fn copy_pairs(n: usize, seed: u64) -> Vec<EncodedPair> {
    let mut r = rng::stream(seed, &[]);
    (0..n)
        .map(|_| {
            let len = 2 + rng::below(&mut r, 4);
            let s: Vec<u32> = (0..len).map(|_| 4 + rng::below(&mut r, 8) as u32).collect();
            EncodedPair { source: s.clone(), target: s }
        })
        .collect()
}

fn hp(max_steps: u64) -> Hyperparameters {
    Hyperparameters {
        learning_rate: 0.05,
        warmup_steps: 10,
        batch_tokens: 48,
        max_steps,
        validation_interval: 5,
        checkpoint_interval: 10,
        patience: 100,
        ..Hyperparameters::transformer()
    }
}

fn run(kind: ArchKind, hp: &Hyperparameters, seed: u64) -> (Vec<TrainingEvent>, Checkpoint) {
    let (tr, va) = (copy_pairs(40, 1), copy_pairs(8, 2));
    let clock = VirtualClock::new(1.0e9, 0.5);
    let mut sink = Vec::new();
    let mut opts = TrainOptions { clock: &clock, ..TrainOptions::new(&mut sink) };
    let out = train(Seq2SeqModel::build(config(kind), seed).unwrap(), &tr, &va, hp, &mut opts).unwrap();
    assert_eq!(out.events, sink);
    (out.events, out.last)
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let mut c = config(ArchKind::Transformer);
    c.target_vocab_size = 10;
    for kind in [ArchKind::Transformer, ArchKind::Rnn] {
        c.kind = kind;
        let mut m = Seq2SeqModel::build(c.clone(), 0).unwrap();
        for p in m.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let valid: Vec<EncodedPair> = copy_pairs(6, 3).into_iter().map(|p| EncodedPair { target: p.target.iter().map(|t| t % 10).collect(), ..p }).collect();
        let v = validate(&m, &valid).unwrap();
        assert!((v.ppl - 10.0).abs() < 1e-6, "{kind:?}: {}", v.ppl);
        assert!((v.ppl - v.nll.exp()).abs() < 1e-12);
    }
}

#[test]
fn confident_gold_logits_approach_perfect_scores() {
    let targets = [4u32, 7, 3];
    let mut last = f64::INFINITY;
    for scale in [5.0, 10.0, 20.0, 40.0] {
        let mut logits = vec![0.0; 3 * 9];
        for (r, &t) in targets.iter().enumerate() {
            logits[r * 9 + t as usize] = scale;
        }
        let s = TokenScores::from_logits(&logits, 9, &targets);
        assert_eq!(s.accuracy(), 1.0);
        let ppl = s.mean_nll().exp();
        assert!(ppl < last && ppl >= 1.0);
        last = ppl;
    }
    assert!(last - 1.0 < 1e-15);
}

#[test]
fn validate_rejects_empty_data() {
    let m = Seq2SeqModel::build(config(ArchKind::Rnn), 0).unwrap();
    assert!(matches!(validate(&m, &[]), Err(TrainingError::DataEmpty)));
    let mut sink = Vec::new();
    let r = train(m, &copy_pairs(3, 1), &[], &hp(5), &mut TrainOptions::new(&mut sink));
    assert!(matches!(r, Err(TrainingError::DataEmpty)));
}

#[test]
fn zero_max_steps_is_rejected() {
    let m = Seq2SeqModel::build(config(ArchKind::Transformer), 0).unwrap();
    let mut sink = Vec::new();
    let r = train(m, &copy_pairs(3, 1), &copy_pairs(3, 2), &hp(0), &mut TrainOptions::new(&mut sink));
    assert!(matches!(r, Err(TrainingError::InvalidHyperparameters(_))));
}

#[test]
fn identical_runs_give_identical_logs_and_parameters() {
    for kind in [ArchKind::Transformer, ArchKind::Rnn] {
        let (e1, c1) = run(kind, &hp(20), 4);
        let (e2, c2) = run(kind, &hp(20), 4);
        assert_eq!(e1, e2);
        assert_eq!(c1, c2);
        let (_, c3) = run(kind, &hp(20), 5);
        assert_ne!(c1.model.params, c3.model.params);
    }
}

#[test]
fn events_are_well_formed() {
    let (events, last) = run(ArchKind::Transformer, &hp(23), 1);
    assert_eq!(events.iter().map(|e| e.step).collect::<Vec<_>>(), vec![5, 10, 15, 20, 23]);
    for e in &events {
        assert!((e.valid_ppl - e.valid_nll.exp()).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&e.valid_accuracy) && (0.0..=1.0).contains(&e.train_accuracy));
        assert!(e.train_loss > 0.0 && e.learning_rate > 0.0);
    }
    assert!(events.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    assert_eq!(last.progress.step, 23);
    assert!(events.last().unwrap().valid_ppl < events[0].valid_ppl);
}

struct Ramp(std::cell::Cell<f64>);

impl EnergyProbe for Ramp {
    fn kwh(&self) -> f64 {
        self.0.set(self.0.get() + 0.25);
        self.0.get()
    }
}

#[test]
fn energy_snapshots_are_cumulative() {
    let probe = Ramp(std::cell::Cell::new(0.0));
    let mut sink = Vec::new();
    let mut opts = TrainOptions { energy: &probe, ..TrainOptions::new(&mut sink) };
    let m = Seq2SeqModel::build(config(ArchKind::Rnn), 1).unwrap();
    let out = train(m, &copy_pairs(20, 1), &copy_pairs(4, 2), &hp(15), &mut opts).unwrap();
    let energy: Vec<f64> = out.events.iter().map(|e| e.energy_kwh).collect();
    assert_eq!(energy, vec![0.25, 0.5, 0.75]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (tr, va) = (copy_pairs(40, 1), copy_pairs(8, 2));
    for kind in [ArchKind::Transformer, ArchKind::Rnn] {
        for k in [7, 10, 13] {
            let (_, full) = run(kind, &hp(30), 6);
            let mut sink = Vec::new();
            let first = train(Seq2SeqModel::build(config(kind), 6).unwrap(), &tr, &va, &hp(k), &mut TrainOptions::new(&mut sink)).unwrap();
            let restored = Checkpoint::from_bytes(&first.last.to_bytes()).unwrap();
            let second = resume(restored, &tr, &va, &hp(30), &mut TrainOptions::new(&mut sink)).unwrap();
            for (a, b) in full.model.params.iter().zip(second.last.model.params.iter()) {
                for (x, y) in a.value.data().iter().zip(b.value.data()) {
                    assert!((x - y).abs() <= 1e-12, "{kind:?} k={k} {}: {x} vs {y}", a.name);
                }
            }
            assert_eq!(full.optimizer.step, second.last.optimizer.step);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_damage() {
    let (_, ck) = run(ArchKind::Rnn, &hp(6), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert!(!back.optimizer.first_moments.is_empty());

    let bytes = ck.to_bytes();
    for cut in [0, 5, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(TrainingError::CorruptCheckpoint(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(TrainingError::CorruptCheckpoint(_))));
    let mut bumped = bytes;
    bumped[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bumped), Err(TrainingError::VersionMismatch { found: 2, expected: 1 })));
}

#[test]
fn checkpoints_are_written_during_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut sink = Vec::new();
    let mut opts = TrainOptions { checkpoint_dir: Some(dir.path()), ..TrainOptions::new(&mut sink) };
    let m = Seq2SeqModel::build(config(ArchKind::Transformer), 1).unwrap();
    let out = train(m, &copy_pairs(20, 1), &copy_pairs(4, 2), &hp(20), &mut opts).unwrap();
    for name in ["step-10.ckpt", "step-20.ckpt", "best.ckpt", "last.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(load_checkpoint(&dir.path().join("last.ckpt")).unwrap(), out.last);
    let best = out.best.unwrap();
    assert_eq!(load_checkpoint(&dir.path().join("best.ckpt")).unwrap(), best);
    let best_ppl = out.events.iter().map(|e| e.valid_ppl).fold(f64::INFINITY, f64::min);
    assert_eq!(best.progress.last_validation.unwrap().ppl, best_ppl);
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = (copy_pairs(20, 1), copy_pairs(4, 2));
    let mut sink = Vec::new();
    let mut opts = TrainOptions { checkpoint_dir: Some(dir.path()), ..TrainOptions::new(&mut sink) };
    let out = train(Seq2SeqModel::build(config(ArchKind::Transformer), 1).unwrap(), &tr, &va, &hp(10), &mut opts).unwrap();
    let mut broken = out.last;
    broken.model.params.iter_mut().next().unwrap().value.data_mut().fill(f64::NAN);
    let mut opts = TrainOptions { checkpoint_dir: Some(dir.path()), ..TrainOptions::new(&mut sink) };
    let r = resume(broken, &tr, &va, &hp(20), &mut opts);
    assert!(matches!(r, Err(TrainingError::NonFiniteLoss { step: 11 })));
    assert!(load_checkpoint(&dir.path().join("step-10.ckpt")).unwrap().model.params.iter().all(|p| p.value.is_finite()));
}

#[test]
fn early_stopping_and_plateau_halving() {
    let still = Hyperparameters { learning_rate: 0.0, patience: 2, schedule: LrSchedule::Plateau, ..hp(100) };
    let mut sink = Vec::new();
    let m = Seq2SeqModel::build(config(ArchKind::Rnn), 1).unwrap();
    let out = train(m, &copy_pairs(20, 1), &copy_pairs(4, 2), &still, &mut TrainOptions::new(&mut sink)).unwrap();
    assert_eq!(out.stop, StopReason::EarlyStop);
    assert_eq!(out.last.progress.step, 15);
    assert_eq!(out.last.progress.lr_scale, 0.25);
}

#[test]
fn fine_tune_behaviour() {
    let (tr, va) = (copy_pairs(40, 1), copy_pairs(8, 2));
    let mut base = run(ArchKind::Transformer, &hp(40), 3).1;
    base.model = base.model.with_subword_digests("src", "tgt");

    let frozen = Hyperparameters { learning_rate: 0.0, max_steps: 5, ..hp(5) };
    let mut sink = Vec::new();
    let out = fine_tune(base.clone(), ("src", "tgt"), &tr, &va, &frozen, &mut TrainOptions::new(&mut sink)).unwrap();
    assert_eq!(out.last.model.params, base.model.params);
    assert_eq!(out.last.progress.step, 45);

    let gentle = Hyperparameters { validation_interval: 1, max_steps: 3, ..hp(3) };
    let out = fine_tune(base.clone(), ("src", "tgt"), &tr, &va, &gentle, &mut TrainOptions::new(&mut sink)).unwrap();
    let before = base.progress.last_validation.unwrap().nll;
    let after = out.events[0].valid_nll;
    assert!((after - before).abs() <= 0.05 * before, "{before} -> {after}");
    assert_eq!(out.events[0].step, 41);

    let r = fine_tune(base, ("src", "other"), &tr, &va, &gentle, &mut TrainOptions::new(&mut sink));
    assert!(matches!(r, Err(TrainingError::SubwordDigestMismatch { .. })));
}

#[test]
fn jsonl_and_channel_sinks_keep_every_event() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("logs/events.jsonl");
    let (tx, rx) = sync_channel(1);
    let reader = std::thread::spawn(move || rx.iter().collect::<Vec<TrainingEvent>>());
    let mut sinks = (JsonlSink::append(&path).unwrap(), ChannelSink(tx));
    let m = Seq2SeqModel::build(config(ArchKind::Transformer), 1).unwrap();
    let small = Hyperparameters { validation_interval: 1, ..hp(8) };
    let out = train(m, &copy_pairs(20, 1), &copy_pairs(4, 2), &small, &mut TrainOptions::new(&mut sinks)).unwrap();
    drop(sinks);
    let received = reader.join().unwrap();
    assert_eq!(received, out.events);
    let lines: Vec<TrainingEvent> = std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, out.events);
}
