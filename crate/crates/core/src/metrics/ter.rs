use super::bleu::as_strs;
use super::{check, MetricsError};

/// Longest hypothesis span considered for a block shift.
pub const MAX_SHIFT_SPAN: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TerPair {
    /// Insertions, deletions and substitutions after shifting, plus shifts.
    pub edits: usize,
    pub shifts: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerScore {
    /// Total edits per reference token, ×100.
    pub score: f64,
    pub edits: usize,
    pub ref_tokens: usize,
    /// Pairs with an empty reference, left out of both sums.
    pub skipped: usize,
}

/// Unit-cost Levenshtein distance over tokens.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

fn shifted<T: Copy>(v: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = v[..start].iter().chain(&v[start + len..]).copied().collect();
    let span = &v[start..start + len];
    rest.splice(dest..dest, span.iter().copied());
    rest
}

/// Greedy shift search. Each round tries every hypothesis span of up to
/// [`MAX_SHIFT_SPAN`] tokens that also occurs in the reference, at every
/// destination, and applies the one giving the lowest edit distance. A
/// shift is kept only if it lowers the total (edit distance plus one for
/// the shift itself).
pub fn ter_pair<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> TerPair {
    let r = as_strs(reference);
    let mut h = as_strs(hyp);
    let mut cur = edit_distance(&h, &r);
    let mut shifts = 0;
    loop {
        let mut best: Option<(usize, Vec<&str>)> = None;
        for len in (1..=MAX_SHIFT_SPAN.min(h.len())).rev() {
            for start in 0..=h.len() - len {
                let span = &h[start..start + len];
                if !r.windows(len).any(|w| w == span) {
                    continue;
                }
                for dest in 0..=h.len() - len {
                    if dest == start {
                        continue;
                    }
                    let cand = shifted(&h, start, len, dest);
                    let d = edit_distance(&cand, &r);
                    if best.as_ref().is_none_or(|(b, _)| d < *b) {
                        best = Some((d, cand));
                    }
                }
            }
        }
        match best {
            Some((d, cand)) if d + 1 < cur => {
                h = cand;
                cur = d;
                shifts += 1;
            }
            _ => break,
        }
    }
    TerPair { edits: cur + shifts, shifts, ref_len: r.len() }
}

/// Corpus TER: total edits over total reference tokens. Pairs with an empty
/// reference are skipped and counted.
pub fn ter<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<TerScore, MetricsError> {
    check(hyps.len(), refs.len())?;
    let (mut edits, mut ref_tokens, mut skipped) = (0, 0, 0);
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if r.is_empty() {
            log::warn!("ter: pair {i} has an empty reference; skipped");
            skipped += 1;
            continue;
        }
        let p = ter_pair(h, r);
        edits += p.edits;
        ref_tokens += p.ref_len;
    }
    if ref_tokens == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(TerScore { score: 100.0 * edits as f64 / ref_tokens as f64, edits, ref_tokens, skipped })
}
