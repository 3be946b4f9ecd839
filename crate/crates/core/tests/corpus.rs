use std::collections::HashMap;

use proptest::prelude::*;

use nmtbench::corpus::*;

fn numbered(n: usize) -> ParallelCorpus {
    ParallelCorpus::new((0..n).map(|i| SentencePair::new(format!("s{i} x"), format!("t{i}"))).collect(), "src", "tgt")
}

fn spec_strategy() -> impl Strategy<Value = SplitSpec> {
    (0.05f64..0.9, 0.05f64..0.9, any::<u64>()).prop_filter_map("ratios", |(a, b, seed)| {
        let (valid, test) = (a * 0.5, b * 0.5);
        let train = 1.0 - valid - test;
        SplitSpec::new(train, valid, test, seed).ok()
    })
}

#[test]
fn spot_sizes() {
    let s = SplitSpec::default();
    assert_eq!(s.sizes(10), (8, 1, 1));
    assert_eq!(s.sizes(1000), (800, 100, 100));
    assert_eq!(s.sizes(3), (1, 1, 1));
}

#[test]
fn files_round_trip_through_split_layout() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = numbered(25);
    let splits = split(&corpus, &SplitSpec::default()).unwrap();
    let prefix = dir.path().join("corpus");
    write_splits(&splits, &prefix).unwrap();
    let back = load_splits(&prefix, "src", "tgt").unwrap();
    assert_eq!(back.train.pairs, splits.train.pairs);
    assert_eq!(back.valid.pairs, splits.valid.pairs);
    assert_eq!(back.test.pairs, splits.test.pairs);
}

#[test]
fn invalid_utf8_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::write(&s, b"ok\n\xff\xfe\n").unwrap();
    std::fs::write(&t, "ok\nok\n").unwrap();
    assert!(load_parallel(&s, &t).is_err());
}

proptest! {
    #[test]
    fn split_partitions_the_corpus(n in 3usize..300, spec in spec_strategy()) {
        let corpus = numbered(n);
        let s = split(&corpus, &spec).unwrap();
        prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), n);
        prop_assert!(!s.train.is_empty() && !s.valid.is_empty() && !s.test.is_empty());
        prop_assert_eq!((s.train.len(), s.valid.len(), s.test.len()), spec.sizes(n));
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for part in [&s.train, &s.valid, &s.test] {
            for src in part.sources() {
                *seen.entry(src).or_default() += 1;
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(seen.values().all(|&c| c == 1));
        prop_assert_eq!(split(&corpus, &spec).unwrap(), s);
    }

    #[test]
    fn clean_keeps_order_and_bounds(
        pairs in prop::collection::vec(("[a-c ]{0,12}", "[a-c ]{0,12}"), 0..40),
        min in 0usize..3,
        span in 0usize..5,
        dedup: bool,
    ) {
        let corpus = ParallelCorpus::new(pairs.iter().map(|(s, t)| SentencePair::new(s.as_str(), t.as_str())).collect(), "src", "tgt");
        let max = min + span;
        let out = clean(&corpus, min, max, dedup);
        // Survivors appear in the input in the same relative order.
        let mut it = corpus.pairs.iter();
        for p in &out.pairs {
            prop_assert!(it.any(|q| q == p));
            prop_assert!((min..=max).contains(&token_count(&p.source)));
            prop_assert!((min..=max).contains(&token_count(&p.target)));
        }
        if dedup {
            prop_assert!(out.pairs.iter().enumerate().all(|(i, p)| !out.pairs[..i].contains(p)));
        }
        let st = stats(&out);
        prop_assert_eq!(st.pair_count, out.len());
        prop_assert!(st.source.max_len as f64 >= st.source.mean_len);
    }
}
