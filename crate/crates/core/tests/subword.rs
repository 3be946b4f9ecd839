use proptest::prelude::*;

use nmtbench::subword::*;

fn words(pairs: &[(&str, u64)]) -> Vec<(Vec<String>, u64)> {
    pairs.iter().map(|(w, f)| (w.chars().map(String::from).collect(), *f)).collect()
}

/// Best total log-probability over every way of cutting `word` into pieces
/// the model knows.
fn exhaustive_best(model: &SubwordModel, word: &[char]) -> f64 {
    if word.is_empty() {
        return 0.0;
    }
    (1..=word.len())
        .filter_map(|k| {
            let piece: String = word[..k].iter().collect();
            let lp = model.log_prob(model.piece_id(&piece)?)?;
            Some(lp + exhaustive_best(model, &word[k..]))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn all_strings(alphabet: &[char], max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        frontier = frontier.iter().flat_map(|s| alphabet.iter().map(move |c| format!("{s}{c}"))).collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn training_text() -> Vec<String> {
    let mut r = nmtbench::rng::stream(11, &[1]);
    (0..200)
        .map(|_| {
            (0..1 + nmtbench::rng::below(&mut r, 4))
                .map(|_| (0..1 + nmtbench::rng::below(&mut r, 6)).map(|_| ['a', 'b', 'c'][nmtbench::rng::below(&mut r, 3)]).collect::<String>())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[test]
fn bpe_first_merges_on_micro_corpus() {
    let m = learn_merges(&words(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]), 2);
    assert_eq!((m[0].left.as_str(), m[0].right.as_str(), m[0].count), ("e", "s", 9));
    assert_eq!((m[1].left.as_str(), m[1].right.as_str(), m[1].count), ("es", "t", 9));
}

#[test]
fn unigram_viterbi_is_exhaustive_optimum() {
    let text = training_text();
    let model = train_unigram(text.iter().map(String::as_str), 24).unwrap();
    let mut checked = 0;
    for s in all_strings(&['a', 'b', 'c'], 6).iter().filter(|s| !s.is_empty()) {
        let seg = model.encode_ids(s);
        let marked: Vec<char> = mark(s).chars().collect();
        let best = exhaustive_best(&model, &marked);
        let got = model.segmentation_log_prob(&seg);
        assert!((got - best).abs() <= 1e-9 * best.abs().max(1.0), "{s}: {got} vs {best}");
        checked += 1;
    }
    assert_eq!(checked, 3 + 9 + 27 + 81 + 243 + 729);
}

#[test]
fn unigram_em_is_monotone() {
    let text = training_text();
    let trace = UnigramTrainer::new(24).em_trace(text.iter().map(String::as_str), 10).unwrap();
    assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{trace:?}");
}

#[test]
fn unigram_probabilities_sum_to_one() {
    let text = training_text();
    let model = train_unigram(text.iter().map(String::as_str), 24).unwrap();
    let total: f64 = model.pieces().iter().filter_map(|p| p.log_prob).map(f64::exp).sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert!(model.pieces()[..4].iter().map(|p| p.text.as_str()).eq(SPECIAL_PIECES));
}

#[test]
fn decode_marker_examples() {
    let text = ["hello world", "help"];
    let m = train_bpe(text, 40).unwrap();
    assert_eq!(m.decode(&[]).unwrap(), "");
    let ids: Vec<u32> = ["\u{2581}", "h", "e", "l", "l", "o", "\u{2581}", "w"].iter().map(|p| m.piece_id(p).unwrap_or_else(|| panic!("{p}"))).collect();
    assert_eq!(m.decode(&ids).unwrap(), "hello w");
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,8}", 1..8).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn round_trip_is_lossless(corpus in prop::collection::vec(sentence(), 5..30), vocab in 40usize..120) {
        for kind in [ModelKind::Bpe, ModelKind::Unigram] {
            let model = train(kind, corpus.iter().map(String::as_str), vocab).unwrap();
            for s in &corpus {
                prop_assert_eq!(&model.decode(&model.encode_ids(s)).unwrap(), s);
            }
            let again = train(kind, corpus.iter().map(String::as_str), vocab).unwrap();
            prop_assert_eq!(&again, &model);
            prop_assert_eq!(SubwordModel::from_text(&model.to_text()).unwrap(), model);
        }
    }
}
