//! Slow, obviously-correct reference implementations for the metric tests.
#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

pub fn load_golden() -> (Vec<String>, Vec<String>) {
    let text = include_str!("../data/golden_metrics.tsv");
    text.lines()
        .map(|l| {
            let (h, r) = l.split_once('\t').expect("tab-separated pair");
            (h.to_string(), r.to_string())
        })
        .unzip()
}

/// Distinct n-grams of `s` by linear search, each with its count in `s`
/// and in `other`.
fn ngram_table<T: PartialEq + Clone>(s: &[T], other: &[T], n: usize) -> Vec<(Vec<T>, u64, u64)> {
    let count = |v: &[T], g: &[T]| (0..v.len().saturating_sub(n - 1)).filter(|&i| &v[i..i + n] == g).count() as u64;
    let mut seen: Vec<Vec<T>> = Vec::new();
    for i in 0..s.len().saturating_sub(n - 1) {
        let g = s[i..i + n].to_vec();
        if !seen.contains(&g) {
            seen.push(g);
        }
    }
    seen.into_iter()
        .map(|g| {
            let (a, b) = (count(s, &g), count(other, &g));
            (g, a, b)
        })
        .collect()
}

/// (clipped matches, hyp n-grams, ref n-grams)
pub fn clip<T: PartialEq + Clone>(h: &[T], r: &[T], n: usize) -> (u64, u64, u64) {
    let m = ngram_table(h, r, n).iter().map(|(_, a, b)| *a.min(b)).sum();
    let total = |v: &[T]| if v.len() >= n { (v.len() - n + 1) as u64 } else { 0 };
    (m, total(h), total(r))
}

pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut logp = 0.0;
    for n in 1..=4 {
        let (mut m, mut t) = (0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let (a, b, _) = clip(h, r, n);
            m += a;
            t += b;
        }
        if m == 0 {
            return 0.0;
        }
        logp += 0.25 * (m as f64 / t as f64).ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = f64::min(1.0, (1.0 - r as f64 / c as f64).exp());
    100.0 * bp * logp.exp()
}

pub fn chrf(hyps: &[String], refs: &[String], beta: f64) -> f64 {
    let chars = |s: &String| s.chars().filter(|c| !c.is_whitespace()).collect::<Vec<char>>();
    let mut total = 0.0;
    let mut orders = 0;
    for n in 1..=6 {
        let (mut m, mut th, mut tr) = (0, 0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let (a, b, c) = clip(&chars(h), &chars(r), n);
            m += a;
            th += b;
            tr += c;
        }
        if th == 0 && tr == 0 {
            continue;
        }
        orders += 1;
        let p = if th > 0 { m as f64 / th as f64 } else { 0.0 };
        let r = if tr > 0 { m as f64 / tr as f64 } else { 0.0 };
        let b2 = beta * beta;
        if p + r > 0.0 {
            total += (1.0 + b2) * p * r / (b2 * p + r);
        }
    }
    if orders == 0 {
        100.0
    } else {
        100.0 * total / orders as f64
    }
}

/// Full-table Levenshtein.
#[allow(clippy::needless_range_loop)]
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Every arrangement reachable by block shifts, each with the fewest shifts
/// reaching it; returns the minimum of shifts plus edit distance.
pub fn ter_exact(h: &[String], r: &[String]) -> usize {
    assert!(h.len() <= 8, "exhaustive shift search is limited to 8 tokens");
    let mut seen: HashSet<Vec<String>> = HashSet::from([h.to_vec()]);
    let mut queue = VecDeque::from([(h.to_vec(), 0usize)]);
    let mut best = usize::MAX;
    while let Some((cur, k)) = queue.pop_front() {
        best = best.min(k + levenshtein(&cur, r));
        if k + 1 >= best {
            continue;
        }
        for start in 0..cur.len() {
            for end in start + 1..=cur.len() {
                let span = cur[start..end].to_vec();
                let rest: Vec<String> = cur[..start].iter().chain(&cur[end..]).cloned().collect();
                for dest in 0..=rest.len() {
                    let mut next = rest.clone();
                    next.splice(dest..dest, span.iter().cloned());
                    if seen.insert(next.clone()) {
                        queue.push_back((next, k + 1));
                    }
                }
            }
        }
    }
    best
}

/// Every alignment enumerated; most links first, then fewest chunks.
pub fn meteor_counts(h: &[String], r: &[String]) -> (usize, usize) {
    fn go(h: &[String], r: &[String], i: usize, used: &mut Vec<bool>, links: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == h.len() {
            let m = links.len();
            let chunks = (0..m).filter(|&k| k == 0 || links[k].0 != links[k - 1].0 + 1 || links[k].1 != links[k - 1].1 + 1).count();
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        go(h, r, i + 1, used, links, best);
        for j in 0..r.len() {
            if !used[j] && h[i] == r[j] {
                used[j] = true;
                links.push((i, j));
                go(h, r, i + 1, used, links, best);
                links.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    go(h, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

pub fn meteor(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let (mut m, mut c, mut hl, mut rl) = (0, 0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (a, b) = meteor_counts(h, r);
        m += a;
        c += b;
        hl += h.len();
        rl += r.len();
    }
    if m == 0 {
        return 0.0;
    }
    let (p, r) = (m as f64 / hl as f64, m as f64 / rl as f64);
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    fmean * (1.0 - 0.5 * (c as f64 / m as f64).powi(3))
}

pub fn f1(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let (mut m, mut hl, mut rl) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        m += clip(h, r, 1).0;
        hl += h.len();
        rl += r.len();
    }
    if m == 0 {
        return 0.0;
    }
    let (p, r) = (m as f64 / hl as f64, m as f64 / rl as f64);
    2.0 * p * r / (p + r)
}
