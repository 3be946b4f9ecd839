//! Decode models given directly as next-token distributions.
#![allow(dead_code)]

use nmtbench::models::{DecodeModel, DecodeSession, ModelError};
use nmtbench::rng;
use nmtbench::subword::{BOS_ID, EOS_ID};

/// A decode model defined by a function from prefix to next-token distribution.
pub struct Toy<F> {
    pub vocab: usize,
    pub next: F,
}

impl<F: Fn(&[u32]) -> Vec<f64>> DecodeModel for Toy<F> {
    fn target_vocab_size(&self) -> usize {
        self.vocab
    }

    fn target_digest(&self) -> &str {
        "toy"
    }

    fn start(&self, _source: &[u32]) -> Result<Box<dyn DecodeSession + '_>, ModelError> {
        Ok(Box::new(ToySession(self)))
    }
}

struct ToySession<'a, F>(&'a Toy<F>);

impl<F: Fn(&[u32]) -> Vec<f64>> DecodeSession for ToySession<'_, F> {
    fn next_probs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(prefixes.iter().map(|p| (self.0.next)(p)).collect())
    }
}

pub fn random_toy(seed: u64, vocab: usize) -> Toy<impl Fn(&[u32]) -> Vec<f64>> {
    Toy {
        vocab,
        next: move |prefix: &[u32]| {
            let tags: Vec<u64> = prefix.iter().map(|&t| t as u64).collect();
            let mut r = rng::stream(seed, &tags);
            let w: Vec<f64> = (0..vocab).map(|_| (3.0 * rng::unit(&mut r)).exp()).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z).collect()
        },
    }
}

/// A prefix after `<s>` and its next-token probabilities.
pub type Row = (&'static [u32], &'static [(u32, f64)]);

/// Distributions from a table keyed by the prefix after `<s>`; unlisted
/// prefixes force `</s>`.
pub fn table_toy(rows: &'static [Row]) -> Toy<impl Fn(&[u32]) -> Vec<f64>> {
    Toy {
        vocab: 6,
        next: move |prefix: &[u32]| {
            let mut p = vec![0.0; 6];
            match rows.iter().find(|(k, _)| *k == &prefix[1..]) {
                Some((_, probs)) => probs.iter().for_each(|&(t, v)| p[t as usize] = v),
                None => p[EOS_ID as usize] = 1.0,
            }
            p
        },
    }
}

pub const A: u32 = 4;
pub const B: u32 = 5;

/// Greedy takes `a` (0.6) and then scores 0.6·0.5; beam 2 keeps `b` and
/// reaches 0.4·0.9.
pub static TWO_STEP: &[Row] = &[(&[], &[(A, 0.6), (B, 0.4)]), (&[A], &[(A, 0.5), (B, 0.5)]), (&[B], &[(A, 0.9), (B, 0.1)])];

/// Best normalized score over every sequence of at most three tokens.
pub fn exhaustive_best(toy: &Toy<impl Fn(&[u32]) -> Vec<f64>>, alpha: f64) -> (Vec<u32>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(vec![BOS_ID], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let p = (toy.next)(&prefix);
        for t in (EOS_ID..toy.vocab as u32).filter(|_| prefix.len() <= 3) {
            let lp = lp + p[t as usize].ln();
            let mut next = prefix.clone();
            next.push(t);
            if t == EOS_ID {
                let score = lp / ((next.len() - 1) as f64).powf(alpha);
                if score > best.1 {
                    best = (next[1..].to_vec(), score);
                }
            } else {
                stack.push((next, lp));
            }
        }
    }
    best
}
