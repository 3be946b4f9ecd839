use super::{check, clipped_overlap, MetricsError};

/// Per-order clipped character n-gram matches and totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChrfStats {
    pub matches: Vec<u64>,
    pub hyp_totals: Vec<u64>,
    pub ref_totals: Vec<u64>,
}

impl ChrfStats {
    pub fn new(order: usize) -> Self {
        Self { matches: vec![0; order], hyp_totals: vec![0; order], ref_totals: vec![0; order] }
    }

    pub fn add_pair(&mut self, hyp: &str, reference: &str) {
        let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<Vec<char>>();
        let (h, r) = (strip(hyp), strip(reference));
        for n in 1..=self.matches.len() {
            let (m, th, tr) = clipped_overlap(&h, &r, n);
            self.matches[n - 1] += m;
            self.hyp_totals[n - 1] += th;
            self.ref_totals[n - 1] += tr;
        }
    }

    /// `100 ·` mean over orders of F_β. Orders with no n-grams on either
    /// side are left out of the mean; if every order is empty the texts are
    /// both empty and the score is 100.
    pub fn score(&self, beta: f64) -> f64 {
        let b2 = beta * beta;
        let mut sum = 0.0;
        let mut used = 0;
        for i in 0..self.matches.len() {
            let (m, th, tr) = (self.matches[i] as f64, self.hyp_totals[i], self.ref_totals[i]);
            if th == 0 && tr == 0 {
                continue;
            }
            used += 1;
            let p = if th == 0 { 0.0 } else { m / th as f64 };
            let r = if tr == 0 { 0.0 } else { m / tr as f64 };
            if p > 0.0 || r > 0.0 {
                sum += (1.0 + b2) * p * r / (b2 * p + r);
            }
        }
        if used == 0 {
            100.0
        } else {
            100.0 * sum / used as f64
        }
    }
}

/// Corpus ChrF_β over character n-grams of orders `1..=order`.
pub fn chrf<T: AsRef<str>>(hyps: &[T], refs: &[T], order: usize, beta: f64) -> Result<f64, MetricsError> {
    check(hyps.len(), refs.len())?;
    let mut s = ChrfStats::new(order);
    for (h, r) in hyps.iter().zip(refs) {
        s.add_pair(h.as_ref(), r.as_ref());
    }
    Ok(s.score(beta))
}
