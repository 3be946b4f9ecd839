//! Automatic evaluation: BLEU (corpus and sentence), ChrF, TER with shifts,
//! an exact-match Meteor variant and token F1.
//!
//! Word-level metrics share one tokenizer ([`tokenize_eval`]): optional
//! lowercasing, every Unicode punctuation character split into its own token,
//! then whitespace splitting. ChrF works on characters with whitespace
//! removed. Corpus scores aggregate counts over all pairs, so they do not
//! depend on pair order.

mod bleu;
mod chrf;
mod meteor;
mod ter;

pub use bleu::{bleu_corpus, bleu_sentence, BleuStats};
pub use chrf::{chrf, ChrfStats};
pub use meteor::{align as meteor_align, f1_tokens, meteor_lite, MeteorAlignment, MeteorParams};
pub use ter::{edit_distance, ter, ter_pair, TerPair, TerScore, MAX_SHIFT_SPAN};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory as Gc};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("no sentence pairs to score")]
    Empty,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

pub(crate) fn check(hyps: usize, refs: usize) -> Result<(), MetricsError> {
    if hyps != refs {
        return Err(MetricsError::LengthMismatch { hyps, refs });
    }
    if hyps == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseMode {
    Truecase,
    Lowercase,
}

impl CaseMode {
    pub fn apply(self, text: &str) -> String {
        match self {
            CaseMode::Truecase => text.to_string(),
            CaseMode::Lowercase => text.to_lowercase(),
        }
    }
}

pub const TOKENIZER_ID: &str = "nmtbench-punct-v1";

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        Gc::ClosePunctuation
            | Gc::ConnectorPunctuation
            | Gc::DashPunctuation
            | Gc::FinalPunctuation
            | Gc::InitialPunctuation
            | Gc::OpenPunctuation
            | Gc::OtherPunctuation
    )
}

/// Lowercases (in [`CaseMode::Lowercase`]), isolates punctuation characters
/// and splits on whitespace.
pub fn tokenize_eval(text: &str, case: CaseMode) -> Vec<String> {
    let text = case.apply(text);
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() || is_punctuation(c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    Chrf,
    Ter,
    MeteorLite,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Bleu, Metric::Chrf, Metric::Ter, Metric::MeteorLite, Metric::F1];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Case modes to score under; each gets its own row in the report.
    pub cases: Vec<CaseMode>,
    pub bleu_max_order: usize,
    /// Also report smoothed sentence BLEU for every pair.
    pub sentence_bleu: bool,
    pub chrf_char_order: usize,
    pub chrf_betas: Vec<f64>,
    pub meteor: MeteorParams,
    pub tokenizer: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cases: vec![CaseMode::Truecase, CaseMode::Lowercase],
            bleu_max_order: 4,
            sentence_bleu: false,
            chrf_char_order: 6,
            chrf_betas: vec![1.0, 3.0],
            meteor: MeteorParams::default(),
            tokenizer: TOKENIZER_ID.into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: &str| Err(MetricsError::InvalidConfig(m.into()));
        if self.bleu_max_order == 0 || self.chrf_char_order == 0 {
            return bad("n-gram orders must be at least 1");
        }
        if self.chrf_betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad("chrf beta must be positive");
        }
        if self.tokenizer != TOKENIZER_ID {
            return Err(MetricsError::InvalidConfig(format!("unknown tokenizer {:?}", self.tokenizer)));
        }
        self.meteor.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChrfScore {
    pub beta: f64,
    pub score: f64,
}

/// Scores under one case mode. BLEU and ChrF are on 0–100, TER is edits per
/// reference token ×100, Meteor-lite and F1 are on 0–1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case: CaseMode,
    pub bleu: Option<f64>,
    pub chrf: Vec<ChrfScore>,
    pub ter: Option<f64>,
    pub meteor_lite: Option<f64>,
    pub f1: Option<f64>,
    pub sentence_bleu: Option<Vec<f64>>,
    /// Pairs left out of TER because the reference was empty.
    pub ter_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pairs: usize,
    pub hypothesis_tokens: usize,
    pub reference_tokens: usize,
    pub scores: Vec<CaseScores>,
    pub config: EvalConfig,
    pub notes: Vec<String>,
}

impl EvaluationReport {
    pub fn case(&self, case: CaseMode) -> Option<&CaseScores> {
        self.scores.iter().find(|s| s.case == case)
    }

    /// Fixed-width table, one row per case mode.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>, digits: usize| v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into());
        let mut head = format!("{:<10} {:>8}", "case", "BLEU");
        for b in &self.config.chrf_betas {
            head.push_str(&format!(" {:>8}", format!("ChrF{b}")));
        }
        head.push_str(&format!(" {:>8} {:>11} {:>8}\n", "TER", "meteor_lite", "F1"));
        let mut out = head;
        for s in &self.scores {
            let case = match s.case {
                CaseMode::Truecase => "truecase",
                CaseMode::Lowercase => "lowercase",
            };
            out.push_str(&format!("{case:<10} {:>8}", fmt(s.bleu, 2)));
            for b in &self.config.chrf_betas {
                let v = s.chrf.iter().find(|c| c.beta == *b).map(|c| c.score);
                out.push_str(&format!(" {:>8}", fmt(v, 2)));
            }
            out.push_str(&format!(" {:>8} {:>11} {:>8}\n", fmt(s.ter, 2), fmt(s.meteor_lite, 4), fmt(s.f1, 4)));
        }
        out
    }
}

/// Runs the selected metrics under every configured case mode.
pub fn evaluate(hyps: &[String], refs: &[String], config: &EvalConfig, metrics: &[Metric]) -> Result<EvaluationReport, MetricsError> {
    config.validate()?;
    check(hyps.len(), refs.len())?;
    let want = |m: Metric| metrics.contains(&m);
    let mut scores = Vec::new();
    for &case in &config.cases {
        let h: Vec<Vec<String>> = hyps.iter().map(|s| tokenize_eval(s, case)).collect();
        let r: Vec<Vec<String>> = refs.iter().map(|s| tokenize_eval(s, case)).collect();
        let (ht, rt) = (case_texts(hyps, case), case_texts(refs, case));
        let ter_score = if want(Metric::Ter) { Some(ter(&h, &r)?) } else { None };
        scores.push(CaseScores {
            case,
            bleu: if want(Metric::Bleu) { Some(bleu_corpus(&h, &r, config.bleu_max_order)?) } else { None },
            chrf: if want(Metric::Chrf) {
                config
                    .chrf_betas
                    .iter()
                    .map(|&beta| Ok(ChrfScore { beta, score: chrf(&ht, &rt, config.chrf_char_order, beta)? }))
                    .collect::<Result<_, MetricsError>>()?
            } else {
                Vec::new()
            },
            ter: ter_score.as_ref().map(|t| t.score),
            ter_skipped: ter_score.as_ref().map_or(0, |t| t.skipped),
            meteor_lite: if want(Metric::MeteorLite) { Some(meteor_lite(&h, &r, &config.meteor)?) } else { None },
            f1: if want(Metric::F1) { Some(f1_tokens(&h, &r)?) } else { None },
            sentence_bleu: if config.sentence_bleu && want(Metric::Bleu) {
                Some(h.iter().zip(&r).map(|(a, b)| bleu_sentence(a, b, config.bleu_max_order)).collect())
            } else {
                None
            },
        });
    }
    let first = config.cases.first().copied().unwrap_or(CaseMode::Truecase);
    let count = |v: &[String]| v.iter().map(|s| tokenize_eval(s, first).len()).sum();
    let mut notes = Vec::new();
    if want(Metric::MeteorLite) {
        notes.push("meteor_lite: exact-match alignment only (no stem or synonym stages); corpus value aggregates counts".into());
    }
    if want(Metric::F1) {
        notes.push("f1: corpus value aggregates matched and length counts (micro-average)".into());
    }
    Ok(EvaluationReport { pairs: hyps.len(), hypothesis_tokens: count(hyps), reference_tokens: count(refs), scores, config: config.clone(), notes })
}

fn case_texts(texts: &[String], case: CaseMode) -> Vec<String> {
    texts.iter().map(|t| case.apply(t)).collect()
}

/// Clipped n-gram overlap: for each distinct n-gram, the smaller of its
/// counts on the two sides, summed.
fn ngram_counts<T: std::hash::Hash + Eq>(s: &[T], n: usize) -> std::collections::HashMap<&[T], u64> {
    let mut m = std::collections::HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

pub(crate) fn clipped_overlap<T: std::hash::Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> (u64, u64, u64) {
    let (h, r) = (ngram_counts(hyp, n), ngram_counts(reference, n));
    let matched = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    let total = |s: &[T]| s.len().saturating_sub(n - 1) as u64;
    (matched, total(hyp), total(reference))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize_eval(s, CaseMode::Truecase)
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_eval("Hello, world!", CaseMode::Lowercase), ["hello", ",", "world", "!"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("«Dia duit» — a chara…"), ["«", "Dia", "duit", "»", "—", "a", "chara", "…"]);
        assert_eq!(toks("$5 + 3"), ["$5", "+", "3"]);
        for s in ["Hello, world!", "it's (very) good", "  spaced\tout  ", "a.b.c"] {
            let once = toks(s);
            assert_eq!(toks(&once.join(" ")), once);
        }
    }

    #[test]
    fn evaluate_identical_corpus() {
        let t: Vec<String> = ["the cat sat on the mat", "a b"].iter().map(|s| s.to_string()).collect();
        let r = evaluate(&t, &t, &EvalConfig::default(), &Metric::ALL).unwrap();
        let s = r.case(CaseMode::Truecase).unwrap();
        assert_eq!(s.bleu, Some(100.0));
        assert!(s.chrf.iter().all(|c| c.score == 100.0));
        assert_eq!(s.ter, Some(0.0));
        assert_eq!(s.f1, Some(1.0));
        // 8 matches in 2 chunks: 1 - 0.5 * (2/8)^3.
        assert_eq!(s.meteor_lite, Some(1.0 - 0.5 * (2.0f64 / 8.0).powi(3)));
        assert_eq!(r.config, EvalConfig::default());
        assert_eq!(r.hypothesis_tokens, 8);
        assert!(r.table().lines().count() == 3);
    }

    #[test]
    fn case_modes_differ() {
        let h = vec!["Hello there".to_string()];
        let r = vec!["hello there".to_string()];
        let rep = evaluate(&h, &r, &EvalConfig::default(), &[Metric::F1]).unwrap();
        assert_eq!(rep.case(CaseMode::Truecase).unwrap().f1, Some(0.5));
        assert_eq!(rep.case(CaseMode::Lowercase).unwrap().f1, Some(1.0));
        assert!(rep.case(CaseMode::Lowercase).unwrap().bleu.is_none());
    }

    #[test]
    fn mismatched_lengths() {
        let h = vec!["a".to_string()];
        assert_eq!(evaluate(&h, &[], &EvalConfig::default(), &Metric::ALL), Err(MetricsError::LengthMismatch { hyps: 1, refs: 0 }));
        assert_eq!(evaluate(&[], &[], &EvalConfig::default(), &Metric::ALL), Err(MetricsError::Empty));
    }
}
