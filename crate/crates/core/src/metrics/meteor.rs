use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::bleu::as_strs;
use super::{check, MetricsError};

/// `F_mean = PR / (αP + (1−α)R)`, `penalty = γ·(chunks/m)^β`. The defaults
/// give `F_mean = 10PR / (R + 9P)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self { alpha: 0.9, beta: 3.0, gamma: 0.5 }
    }
}

impl MeteorParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let ok = (0.0..=1.0).contains(&self.alpha) && (0.0..=1.0).contains(&self.gamma) && self.beta.is_finite() && self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MetricsError::InvalidConfig("meteor needs alpha, gamma in [0, 1] and beta > 0".into()))
        }
    }

    /// Score from aggregated counts.
    pub fn score(&self, matches: u64, chunks: u64, hyp_len: u64, ref_len: u64) -> f64 {
        if matches == 0 {
            return 0.0;
        }
        let m = matches as f64;
        let (p, r) = (m / hyp_len as f64, m / ref_len as f64);
        let fmean = p * r / (self.alpha * p + (1.0 - self.alpha) * r);
        let penalty = self.gamma * (chunks as f64 / m).powf(self.beta);
        fmean * (1.0 - penalty)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeteorAlignment {
    /// `(hyp index, ref index)` in hypothesis order.
    pub links: Vec<(usize, usize)>,
    pub chunks: usize,
    /// False when the search hit its node budget and `chunks` is only the
    /// best found.
    pub optimal: bool,
}

impl MeteorAlignment {
    pub fn matches(&self) -> usize {
        self.links.len()
    }
}

const NODE_BUDGET: usize = 200_000;

/// Exact-match alignment with the most links, and among those the fewest
/// chunks (maximal runs where consecutive hypothesis tokens link to
/// consecutive reference tokens). Depth-first branch and bound.
pub fn align<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> MeteorAlignment {
    let (h, r) = (as_strs(hyp), as_strs(reference));
    let mut ref_pos: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in r.iter().enumerate() {
        ref_pos.entry(w).or_default().push(j);
    }
    let mut hyp_count: HashMap<&str, usize> = HashMap::new();
    for w in &h {
        *hyp_count.entry(w).or_default() += 1;
    }
    // Per type: how many hypothesis tokens may stay unlinked.
    let skips: HashMap<&str, usize> = hyp_count.iter().map(|(w, &c)| (*w, c - c.min(ref_pos.get(w).map_or(0, Vec::len)))).collect();

    let mut s = Search { h: &h, ref_pos: &ref_pos, skips, used: vec![false; r.len()], links: Vec::new(), best: None, nodes: 0 };
    s.dfs(0, None, 0);
    let optimal = s.nodes <= NODE_BUDGET;
    let (links, chunks) = s.best.unwrap_or_default();
    MeteorAlignment { links, chunks, optimal }
}

type Found = (Vec<(usize, usize)>, usize);

struct Search<'a> {
    h: &'a [&'a str],
    ref_pos: &'a HashMap<&'a str, Vec<usize>>,
    skips: HashMap<&'a str, usize>,
    used: Vec<bool>,
    links: Vec<(usize, usize)>,
    best: Option<Found>,
    nodes: usize,
}

impl Search<'_> {
    fn dfs(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if let Some((_, b)) = &self.best {
            if chunks >= *b || self.nodes > NODE_BUDGET {
                return;
            }
        }
        if i == self.h.len() {
            self.best = Some((self.links.clone(), chunks));
            return;
        }
        let w = self.h[i];
        let mut options: Vec<usize> = self.ref_pos.get(w).map_or(Vec::new(), |v| v.iter().copied().filter(|&j| !self.used[j]).collect());
        // Continuing the current chunk is tried first; it never costs a chunk.
        if let Some(p) = prev {
            if let Some(k) = options.iter().position(|&j| j == p + 1) {
                options[..=k].rotate_right(1);
            }
        }
        for j in options {
            let extra = usize::from(prev.is_none_or(|p| p + 1 != j));
            self.used[j] = true;
            self.links.push((i, j));
            self.dfs(i + 1, Some(j), chunks + extra);
            self.links.pop();
            self.used[j] = false;
        }
        let left = self.skips.get(w).copied().unwrap_or(0);
        if left > 0 {
            self.skips.insert(w, left - 1);
            self.dfs(i + 1, None, chunks);
            self.skips.insert(w, left);
        }
    }
}

/// Corpus Meteor-lite: matches, chunks and lengths summed over pairs before
/// the formula is applied.
pub fn meteor_lite<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>], params: &MeteorParams) -> Result<f64, MetricsError> {
    check(hyps.len(), refs.len())?;
    let (mut m, mut c, mut hl, mut rl) = (0u64, 0u64, 0u64, 0u64);
    for (h, r) in hyps.iter().zip(refs) {
        let a = align(h, r);
        if !a.optimal {
            log::warn!("meteor_lite: alignment search budget exhausted; chunk count may be high");
        }
        m += a.matches() as u64;
        c += a.chunks as u64;
        hl += h.len() as u64;
        rl += r.len() as u64;
    }
    Ok(params.score(m, c, hl, rl))
}

/// Bag-of-tokens F1 with matched counts and lengths summed over pairs.
pub fn f1_tokens<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64, MetricsError> {
    check(hyps.len(), refs.len())?;
    let (mut m, mut hl, mut rl) = (0u64, 0u64, 0u64);
    for (h, r) in hyps.iter().zip(refs) {
        m += super::clipped_overlap(&as_strs(h), &as_strs(r), 1).0;
        hl += h.len() as u64;
        rl += r.len() as u64;
    }
    if m == 0 {
        return Ok(0.0);
    }
    let (p, r) = (m as f64 / hl as f64, m as f64 / rl as f64);
    Ok(2.0 * p * r / (p + r))
}
