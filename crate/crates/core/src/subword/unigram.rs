//! Unigram language-model segmentation trained by EM with vocabulary pruning.

use std::collections::HashMap;

use super::{character_inventory, word_frequencies, ModelKind, Piece, SubwordError, SubwordModel, SPECIAL_PIECES};

/// Segmentation lattice of one distinct marked word.
#[derive(Debug, Clone)]
pub struct WordLattice {
    len: usize,
    /// `edges[start]` lists `(end, piece)` for every piece spanning `start..end`.
    edges: Vec<Vec<(usize, usize)>>,
    freq: f64,
}

impl WordLattice {
    fn build(chars: &[char], freq: u64, index: &HashMap<String, usize>, max_len: usize, exclude: Option<usize>) -> Self {
        let n = chars.len();
        let mut edges = vec![Vec::new(); n];
        let mut buf = String::new();
        for (start, slot) in edges.iter_mut().enumerate() {
            buf.clear();
            for end in start + 1..=n.min(start + max_len) {
                buf.push(chars[end - 1]);
                if let Some(&p) = index.get(buf.as_str()) {
                    if Some(p) != exclude {
                        slot.push((end, p));
                    }
                }
            }
        }
        Self { len: n, edges, freq: freq as f64 }
    }

    /// Log of the total probability over all segmentations (forward pass).
    pub fn log_marginal(&self, log_probs: &[f64]) -> f64 {
        self.forward(log_probs)[self.len]
    }

    fn forward(&self, lp: &[f64]) -> Vec<f64> {
        let mut alpha = vec![f64::NEG_INFINITY; self.len + 1];
        alpha[0] = 0.0;
        for start in 0..self.len {
            if alpha[start] == f64::NEG_INFINITY {
                continue;
            }
            for &(end, p) in &self.edges[start] {
                alpha[end] = log_add(alpha[end], alpha[start] + lp[p]);
            }
        }
        alpha
    }

    fn backward(&self, lp: &[f64]) -> Vec<f64> {
        let mut beta = vec![f64::NEG_INFINITY; self.len + 1];
        beta[self.len] = 0.0;
        for start in (0..self.len).rev() {
            for &(end, p) in &self.edges[start] {
                beta[start] = log_add(beta[start], lp[p] + beta[end]);
            }
        }
        beta
    }

    /// Best path as piece indices, or `None` if the lattice has no complete path.
    fn viterbi(&self, lp: &[f64]) -> Option<(f64, Vec<usize>)> {
        let mut best = vec![f64::NEG_INFINITY; self.len + 1];
        let mut back = vec![(0usize, usize::MAX); self.len + 1];
        best[0] = 0.0;
        for start in 0..self.len {
            if best[start] == f64::NEG_INFINITY {
                continue;
            }
            for &(end, p) in &self.edges[start] {
                let s = best[start] + lp[p];
                if s > best[end] {
                    best[end] = s;
                    back[end] = (start, p);
                }
            }
        }
        if best[self.len] == f64::NEG_INFINITY {
            return None;
        }
        let mut path = Vec::new();
        let mut end = self.len;
        while end > 0 {
            let (start, p) = back[end];
            path.push(p);
            end = start;
        }
        path.reverse();
        Some((best[self.len], path))
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum(values: &[f64]) -> f64 {
    values.iter().fold(f64::NEG_INFINITY, |acc, &v| log_add(acc, v))
}

/// Working state: piece strings, their log-probabilities and the corpus lattices.
struct State {
    texts: Vec<String>,
    is_char: Vec<bool>,
    log_probs: Vec<f64>,
    words: Vec<(Vec<char>, u64)>,
    lattices: Vec<WordLattice>,
    max_len: usize,
}

impl State {
    fn index(&self) -> HashMap<String, usize> {
        self.texts.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
    }

    fn rebuild(&mut self) {
        let index = self.index();
        self.lattices = self.words.iter().map(|(w, f)| WordLattice::build(w, *f, &index, self.max_len, None)).collect();
    }

    fn log_likelihood(&self) -> f64 {
        self.lattices.iter().map(|l| l.freq * l.log_marginal(&self.log_probs)).sum()
    }

    /// One EM round; returns the corpus log-likelihood under the parameters
    /// *before* the update.
    fn em_iteration(&mut self) -> f64 {
        let mut expected = vec![0.0; self.texts.len()];
        let mut ll = 0.0;
        for lat in &self.lattices {
            let alpha = lat.forward(&self.log_probs);
            let beta = lat.backward(&self.log_probs);
            let z = alpha[lat.len];
            ll += lat.freq * z;
            for (start, edges) in lat.edges.iter().enumerate() {
                if alpha[start] == f64::NEG_INFINITY {
                    continue;
                }
                for &(end, p) in edges {
                    let post = (alpha[start] + self.log_probs[p] + beta[end] - z).exp();
                    expected[p] += lat.freq * post;
                }
            }
        }
        let total: f64 = expected.iter().sum();
        for (lp, c) in self.log_probs.iter_mut().zip(&expected) {
            *lp = (c.max(f64::MIN_POSITIVE) / total).ln();
        }
        ll
    }

    fn renormalise(&mut self) {
        let z = log_sum(&self.log_probs);
        for lp in &mut self.log_probs {
            *lp -= z;
        }
    }

    /// Drops up to `count` non-character pieces whose loss is cheapest to
    /// absorb. A piece's loss is its Viterbi usage times the log-probability
    /// drop from re-segmenting it with the remaining pieces.
    fn prune(&mut self, count: usize) {
        let n = self.texts.len();
        let mut usage = vec![0.0; n];
        for lat in &self.lattices {
            if let Some((_, path)) = lat.viterbi(&self.log_probs) {
                for p in path {
                    usage[p] += lat.freq;
                }
            }
        }
        let total: f64 = usage.iter().sum();
        let index = self.index();
        let mut losses: Vec<(f64, usize)> = Vec::new();
        for p in 0..n {
            if self.is_char[p] {
                continue;
            }
            if usage[p] == 0.0 {
                losses.push((0.0, p));
                continue;
            }
            let chars: Vec<char> = self.texts[p].chars().collect();
            let alt_lat = WordLattice::build(&chars, 1, &index, self.max_len, Some(p));
            let alt = alt_lat.viterbi(&self.log_probs).map(|(_, path)| path).unwrap_or_default();
            let lp_piece = (usage[p] / total).ln();
            let new_total = total + usage[p] * (alt.len() as f64 - 1.0);
            let lp_alt: f64 = alt.iter().map(|&a| ((usage[a] + usage[p]) / new_total).ln()).sum();
            losses.push((usage[p] * (lp_piece - lp_alt), p));
        }
        losses.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| self.texts[a.1].cmp(&self.texts[b.1])));
        let mut drop = vec![false; n];
        for &(_, p) in losses.iter().take(count) {
            drop[p] = true;
        }
        retain_unmarked(&mut self.texts, &drop);
        retain_unmarked(&mut self.is_char, &drop);
        retain_unmarked(&mut self.log_probs, &drop);
        self.renormalise();
        self.rebuild();
    }
}

fn retain_unmarked<T>(v: &mut Vec<T>, drop: &[bool]) {
    let mut i = 0;
    v.retain(|_| {
        i += 1;
        !drop[i - 1]
    });
}

/// Unigram trainer settings.
#[derive(Debug, Clone)]
pub struct UnigramTrainer {
    pub vocab_size: usize,
    /// Longest seed substring in characters.
    pub max_piece_chars: usize,
    /// Seed vocabulary keeps this many times `vocab_size` multi-character substrings.
    pub seed_factor: usize,
    /// Fraction of prunable pieces removed per pruning round.
    pub shrink_fraction: f64,
    /// EM iterations before each pruning round and after the last one.
    pub em_sub_iterations: usize,
}

impl UnigramTrainer {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, max_piece_chars: 8, seed_factor: 10, shrink_fraction: 0.2, em_sub_iterations: 2 }
    }

    fn seed<'a>(&self, text: impl IntoIterator<Item = &'a str>) -> Result<State, SubwordError> {
        let freqs = word_frequencies(text);
        if freqs.is_empty() {
            return Err(SubwordError::EmptyCorpus);
        }
        let chars = character_inventory(&freqs);
        let minimum = chars.len() + SPECIAL_PIECES.len();
        if self.vocab_size < minimum {
            return Err(SubwordError::VocabTooSmall { requested: self.vocab_size, minimum });
        }
        let words: Vec<(Vec<char>, u64)> = freqs.iter().map(|(w, f)| (w.chars().collect(), *f)).collect();

        let mut char_count: HashMap<char, u64> = HashMap::new();
        let mut sub_count: HashMap<String, u64> = HashMap::new();
        for (w, f) in &words {
            for (i, &c) in w.iter().enumerate() {
                *char_count.entry(c).or_default() += f;
                let mut s = String::from(c);
                for &next in w.iter().skip(i + 1).take(self.max_piece_chars - 1) {
                    s.push(next);
                    *sub_count.entry(s.clone()).or_default() += f;
                }
            }
        }
        let mut subs: Vec<(String, u64)> = sub_count.into_iter().collect();
        subs.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        subs.truncate(self.seed_factor * self.vocab_size);

        let mut texts = Vec::new();
        let mut is_char = Vec::new();
        let mut counts = Vec::new();
        for c in &chars {
            texts.push(c.to_string());
            is_char.push(true);
            counts.push(char_count[c] as f64);
        }
        for (s, c) in subs {
            texts.push(s);
            is_char.push(false);
            counts.push(c as f64);
        }
        let total: f64 = counts.iter().sum();
        let log_probs = counts.iter().map(|c| (c / total).ln()).collect();
        let mut state = State { texts, is_char, log_probs, words, lattices: Vec::new(), max_len: self.max_piece_chars };
        state.rebuild();
        Ok(state)
    }

    /// Runs `iterations` EM rounds on the seed vocabulary without pruning and
    /// returns the corpus log-likelihood after each round (first entry is the
    /// seed likelihood).
    pub fn em_trace<'a>(&self, text: impl IntoIterator<Item = &'a str>, iterations: usize) -> Result<Vec<f64>, SubwordError> {
        let mut state = self.seed(text)?;
        let mut trace = Vec::with_capacity(iterations + 1);
        for _ in 0..iterations {
            trace.push(state.em_iteration());
        }
        trace.push(state.log_likelihood());
        Ok(trace)
    }

    pub fn train<'a>(&self, text: impl IntoIterator<Item = &'a str>) -> Result<SubwordModel, SubwordError> {
        let mut state = self.seed(text)?;
        let target = self.vocab_size - SPECIAL_PIECES.len();
        loop {
            for _ in 0..self.em_sub_iterations {
                state.em_iteration();
            }
            if state.texts.len() <= target {
                break;
            }
            let prunable = state.is_char.iter().filter(|c| !**c).count();
            let step = ((prunable as f64 * self.shrink_fraction).ceil() as usize).max(1);
            state.prune(step.min(state.texts.len() - target));
        }
        state.renormalise();

        let mut order: Vec<usize> = (0..state.texts.len()).collect();
        order.sort_by(|&a, &b| state.log_probs[b].total_cmp(&state.log_probs[a]).then_with(|| state.texts[a].cmp(&state.texts[b])));
        let pieces = order.into_iter().map(|i| Piece { text: state.texts[i].clone(), log_prob: Some(state.log_probs[i]) }).collect();
        Ok(SubwordModel::from_parts(ModelKind::Unigram, pieces, Vec::new()))
    }
}

pub fn train_unigram<'a>(text: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<SubwordModel, SubwordError> {
    UnigramTrainer::new(vocab_size).train(text)
}
