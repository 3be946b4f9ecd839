use super::{check, clipped_overlap, MetricsError};

/// Clipped n-gram matches and hypothesis n-gram totals per order, plus
/// lengths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn new(max_order: usize) -> Self {
        Self { matches: vec![0; max_order], totals: vec![0; max_order], hyp_len: 0, ref_len: 0 }
    }

    pub fn add_pair<T: std::hash::Hash + Eq>(&mut self, hyp: &[T], reference: &[T]) {
        for n in 1..=self.matches.len() {
            let (m, t, _) = clipped_overlap(hyp, reference, n);
            self.matches[n - 1] += m;
            self.totals[n - 1] += t;
        }
        self.hyp_len += hyp.len() as u64;
        self.ref_len += reference.len() as u64;
    }

    /// `100 · BP · exp(mean ln p_n)`. With `add_one`, orders n ≥ 2 use
    /// `(m + 1) / (t + 1)`.
    pub fn score(&self, add_one: bool) -> f64 {
        if self.hyp_len == 0 || self.matches.is_empty() {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (i, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            let (m, t) = if add_one && i > 0 { (m + 1, t + 1) } else { (m, t) };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * (log_sum / self.matches.len() as f64).exp()
    }
}

/// Unsmoothed corpus BLEU over tokenized pairs.
pub fn bleu_corpus<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>], max_order: usize) -> Result<f64, MetricsError> {
    check(hyps.len(), refs.len())?;
    let mut s = BleuStats::new(max_order);
    for (h, r) in hyps.iter().zip(refs) {
        s.add_pair(&as_strs(h), &as_strs(r));
    }
    Ok(s.score(false))
}

/// Sentence BLEU with add-one smoothing for orders 2 and up.
pub fn bleu_sentence<T: AsRef<str>>(hyp: &[T], reference: &[T], max_order: usize) -> f64 {
    let mut s = BleuStats::new(max_order);
    s.add_pair(&as_strs(hyp), &as_strs(reference));
    s.score(true)
}

pub(crate) fn as_strs<T: AsRef<str>>(v: &[T]) -> Vec<&str> {
    v.iter().map(AsRef::as_ref).collect()
}
