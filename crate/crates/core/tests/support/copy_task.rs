//! Synthetic copy-task corpora: the target is the source.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nmtbench::rng;

/// Twenty single-letter words.
pub const VOCAB: [&str; 20] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r", "s", "t"];

pub fn sentences(n: usize, seed: u64, min_len: usize, max_len: usize) -> Vec<String> {
    let mut r = rng::stream(seed, &[0xc0b1]);
    (0..n)
        .map(|_| {
            let len = min_len + rng::below(&mut r, max_len - min_len + 1);
            (0..len).map(|_| VOCAB[rng::below(&mut r, VOCAB.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// Writes `copy.src` and `copy.tgt` (identical) into `dir`.
pub fn write_corpus(dir: &Path, n: usize, seed: u64, min_len: usize, max_len: usize) -> (PathBuf, PathBuf) {
    let text = sentences(n, seed, min_len, max_len).join("\n") + "\n";
    let (s, t) = (dir.join("copy.src"), dir.join("copy.tgt"));
    std::fs::write(&s, &text).unwrap();
    std::fs::write(&t, &text).unwrap();
    (s, t)
}

/// A run config for the copy corpus in `dir`, as TOML. `body` is appended
/// and may override nothing already present.
pub fn config_toml(run_name: &str, arch: &str, body: &str) -> String {
    format!(
        r#"run_name = "{run_name}"
output_root = "runs"

[corpus]
source = "copy.src"
target = "copy.tgt"

[split]
train_ratio = 0.8
valid_ratio = 0.1
test_ratio = 0.1
seed = 7

[subword]
kind = "bpe"
source_vocab_size = 45
target_vocab_size = 45

{arch}

[power]
sample_period_secs = 0.0

[power.provider]
mode = "estimated"
device = "cpu"
tdp_watts = 50.0

{body}"#
    )
}

pub const TINY_TRANSFORMER: &str = r#"[architecture]
kind = "transformer"
layer_count = 1
model_width = 16
head_count = 2
feedforward_width = 32
dropout_rate = 0.0
max_sequence_length = 32

[hyperparameters]
optimizer = "adam"
learning_rate = 0.01
schedule = "plateau"
warmup_steps = 1
batch_tokens = 128
max_steps = 20
validation_interval = 5
checkpoint_interval = 10
label_smoothing = 0.0
seed = 3
patience = 50
"#;
