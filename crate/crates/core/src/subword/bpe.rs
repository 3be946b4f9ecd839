use std::collections::{HashMap, HashSet};

use super::{character_inventory, word_frequencies, ModelKind, Piece, SubwordError, SubwordModel, SPECIAL_PIECES};

/// One learned merge with the pair count that selected it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Merge {
    pub left: String,
    pub right: String,
    pub count: u64,
}

/// Greedy merge learning over a word-frequency table where each word is
/// already split into symbols.
///
/// Each round merges the most frequent adjacent pair; ties go to the
/// lexicographically smallest `(left, right)`. Learning stops after
/// `max_new_symbols` previously unseen symbols have been created or when no
/// pair occurs at least twice.
pub fn learn_merges(words: &[(Vec<String>, u64)], max_new_symbols: usize) -> Vec<Merge> {
    let mut words: Vec<(Vec<String>, u64)> = words.to_vec();
    let mut known: HashSet<String> = words.iter().flat_map(|(w, _)| w.iter().cloned()).collect();
    let mut merges = Vec::new();
    let mut created = 0;
    while created < max_new_symbols {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += f;
            }
        }
        let best = counts.into_iter().filter(|&(_, c)| c >= 2).max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), count)) = best else { break };
        let (left, right) = (l.to_string(), r.to_string());
        let joined = format!("{left}{right}");
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(joined) {
            created += 1;
        }
        merges.push(Merge { left, right, count });
    }
    merges
}

/// Trains a BPE model on whitespace-tokenised, marker-prefixed words.
pub fn train_bpe<'a>(text: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<SubwordModel, SubwordError> {
    let freqs = word_frequencies(text);
    if freqs.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    let chars = character_inventory(&freqs);
    let minimum = chars.len() + SPECIAL_PIECES.len();
    if vocab_size < minimum {
        return Err(SubwordError::VocabTooSmall { requested: vocab_size, minimum });
    }
    let words: Vec<(Vec<String>, u64)> = freqs.iter().map(|(w, f)| (w.chars().map(String::from).collect(), *f)).collect();
    let merges = learn_merges(&words, vocab_size - minimum);

    let mut pieces: Vec<Piece> = chars.iter().map(|c| Piece { text: c.to_string(), log_prob: None }).collect();
    let mut seen: HashSet<String> = pieces.iter().map(|p| p.text.clone()).collect();
    for m in &merges {
        let joined = format!("{}{}", m.left, m.right);
        if seen.insert(joined.clone()) {
            pieces.push(Piece { text: joined, log_prob: None });
        }
    }
    let merges = merges.into_iter().map(|m| (m.left, m.right)).collect();
    Ok(SubwordModel::from_parts(ModelKind::Bpe, pieces, merges))
}
