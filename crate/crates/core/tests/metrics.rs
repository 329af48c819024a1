use std::collections::HashMap;

use orderlab::metrics::{bleu_n, cider, corpus_bleu_n, entropy_k, persona_consistency_proxy, rouge_l, rouge_l_f1, BLEU_EPSILON};
use proptest::prelude::*;

/// Straight-line BLEU from hash-map counts, independent of the library's
/// n-gram machinery.
fn oracle_bleu(cand: &[u8], reference: &[u8], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let counts = |s: &[u8], k: usize| {
        let mut m: HashMap<Vec<u8>, usize> = HashMap::new();
        if s.len() >= k {
            for w in s.windows(k) {
                *m.entry(w.to_vec()).or_default() += 1;
            }
        }
        m
    };
    let mut log_sum = 0.0;
    for k in 1..=n {
        let c = counts(cand, k);
        let r = counts(reference, k);
        let matched: usize = c.iter().map(|(g, &x)| x.min(*r.get(g).unwrap_or(&0))).sum();
        let total = cand.len().saturating_sub(k - 1);
        let p = if total == 0 || matched == 0 { BLEU_EPSILON } else { matched as f64 / total as f64 };
        log_sum += p.ln();
    }
    let bp = if cand.len() < reference.len() { (1.0 - reference.len() as f64 / cand.len() as f64).exp() } else { 1.0 };
    bp * (log_sum / n as f64).exp()
}

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 1..max)
}

fn corpus_pair() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<u8>>)> {
    (2usize..6).prop_flat_map(|n| (prop::collection::vec(seq(9), n), prop::collection::vec(seq(9), n)))
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn single_sample_corpus_bleu_matches_pooled_counts() {
    let cand = words("my dog is a big dog");
    let reference = words("my dog is big and brown");
    for n in 1..=2 {
        let sentence = bleu_n(&cand, &reference, n).unwrap();
        let corpus = corpus_bleu_n(std::slice::from_ref(&cand), std::slice::from_ref(&reference), n).unwrap();
        assert!((sentence - corpus).abs() < 1e-12, "n={n}: {sentence} vs {corpus}");
    }
    // unigrams 4/6 matched (the second "dog" is clipped), bigrams 2/5, equal lengths
    let expected = ((4.0f64 / 6.0) * (2.0 / 5.0)).sqrt();
    assert!((corpus_bleu_n(&[cand], &[reference], 2).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn corpus_bleu_rejects_mismatched_lengths() {
    assert!(corpus_bleu_n(&[words("a b")], &[words("a"), words("b")], 1).is_err());
}

#[test]
fn hand_computed_values() {
    assert!((bleu_n(&words("the the the"), &words("the cat"), 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    let r = rouge_l(&words("the cat sat"), &words("the cat sat on mat")).unwrap();
    assert_eq!((r.precision, r.recall), (1.0, 0.6));
    assert!((r.f1 - 0.75).abs() < 1e-12);
    let h = entropy_k(&[words("a b c d"), words("a b c d"), words("e f g h"), words("i j k l")], 4).unwrap();
    assert!((h - 1.0397207708399179).abs() < 1e-12);
    let c = persona_consistency_proxy(&words("i like tea"), &[words("i like green tea"), words("i have a dog")]).unwrap();
    assert!((c - 0.8).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bleu_agrees_with_oracle(c in seq(10), r in seq(10), n in 1usize..3) {
        let got = bleu_n(&c, &r, n).unwrap();
        let want = oracle_bleu(&c, &r, n);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1e-300) + 1e-300, "{} vs {}", got, want);
    }

    #[test]
    fn per_sample_scores_are_in_range(c in seq(10), r in seq(10)) {
        for n in 1..=2 {
            let b = bleu_n(&c, &r, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
        let rl = rouge_l(&c, &r).unwrap();
        for x in [rl.precision, rl.recall, rl.f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn corpus_scores_are_in_range((cands, refs) in corpus_pair()) {
        for n in 1..=2 {
            let b = corpus_bleu_n(&cands, &refs, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
        let (per, mean) = cider(&cands, &refs, 4).unwrap();
        prop_assert!(per.iter().all(|x| (0.0..=10.0 + 1e-9).contains(x)));
        prop_assert!((0.0..=10.0 + 1e-9).contains(&mean));
        if let Ok(h) = entropy_k(&cands, 2) {
            prop_assert!(h >= 0.0);
        }
    }

    #[test]
    fn identity_attains_the_maximum((cands, refs) in corpus_pair()) {
        for (c, r) in cands.iter().zip(&refs) {
            prop_assert!(bleu_n(r, r, 1).unwrap() >= bleu_n(c, r, 1).unwrap());
            prop_assert!(rouge_l_f1(r, r).unwrap() >= rouge_l_f1(c, r).unwrap());
            prop_assert_eq!(bleu_n(r, r, 1).unwrap(), 1.0);
            prop_assert_eq!(rouge_l_f1(r, r).unwrap(), 1.0);
        }
        prop_assert!((corpus_bleu_n(&refs, &refs, 1).unwrap() - 1.0).abs() < 1e-12);
        if refs.iter().any(|r| r.len() >= 2) {
            prop_assert!((corpus_bleu_n(&refs, &refs, 2).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn appending_a_reference_token_never_lowers_rouge_recall(c in seq(10), r in seq(10), pick in 0usize..100) {
        let before = rouge_l(&c, &r).unwrap().recall;
        let mut longer = c.clone();
        longer.push(r[pick % r.len()]);
        prop_assert!(rouge_l(&longer, &r).unwrap().recall >= before);
    }

    #[test]
    fn doubling_the_corpus_leaves_corpus_bleu_unchanged((cands, refs) in corpus_pair(), n in 1usize..3) {
        let once = corpus_bleu_n(&cands, &refs, n).unwrap();
        let c2: Vec<_> = cands.iter().chain(&cands).cloned().collect();
        let r2: Vec<_> = refs.iter().chain(&refs).cloned().collect();
        prop_assert!((corpus_bleu_n(&c2, &r2, n).unwrap() - once).abs() < 1e-12);
    }

    #[test]
    fn consistency_is_in_range(r in prop::collection::vec("[a-e]", 0..6), p in prop::collection::vec(prop::collection::vec("[a-e]|i|my", 1..6), 1..4)) {
        let s = persona_consistency_proxy(&r, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
