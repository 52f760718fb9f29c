use std::collections::BTreeMap;

use decred::eval::{align, bootstrap_ci, bootstrap_compare, wer, wer_by_id, ScoringMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain Levenshtein distance over words, by full recursion table.
fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, y) in b.iter().enumerate() {
            let v = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
            cur.push(v);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn sentence(rng: &mut impl Rng, vocab: &[&'static str]) -> Vec<&'static str> {
    (0..rng.random_range(0..9)).map(|_| vocab[rng.random_range(0..vocab.len())]).collect()
}

#[test]
fn word_errors_match_an_independent_dp_on_random_pairs() {
    let vocab = ["a", "b", "c", "d", "e"];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let mut total_edits = 0;
    let mut total_words = 0;
    for _ in 0..1000 {
        let r = sentence(&mut rng, &vocab);
        let h = sentence(&mut rng, &vocab);
        let c = align(&r, &h);
        let d = levenshtein(&r, &h);
        assert_eq!(c.errors(), d, "{r:?} / {h:?}");
        assert_eq!(c.ref_words, r.len());
        assert_eq!(c.ref_words + c.insertions - c.deletions, h.len());
        total_edits += d;
        total_words += r.len();
        refs.push(r.join(" "));
        hyps.push(h.join(" "));
    }
    let report = wer(&refs, &hyps, ScoringMode::Raw).unwrap();
    assert_eq!(report.total.errors(), total_edits);
    assert!((report.wer() - total_edits as f64 / total_words as f64).abs() < 1e-15);
}

#[test]
fn keyed_scoring_pairs_by_id() {
    let refs = BTreeMap::from([("u1".to_string(), "a b".to_string()), ("u2".to_string(), "c".to_string())]);
    let hyps = BTreeMap::from([("u2".to_string(), "c".to_string()), ("u1".to_string(), "a x".to_string())]);
    assert_eq!(wer_by_id(&refs, &hyps, ScoringMode::Raw).unwrap().total.errors(), 1);
    let missing = BTreeMap::from([("u1".to_string(), "a b".to_string())]);
    assert!(wer_by_id(&refs, &missing, ScoringMode::Raw).is_err());
}

#[test]
fn bootstrap_is_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs: Vec<(usize, usize)> = (0..200)
        .map(|_| {
            let n = rng.random_range(1..12);
            (rng.random_range(0..=n / 2), n)
        })
        .collect();
    let a = bootstrap_ci(&pairs, 0.05, 1000, 7).unwrap();
    assert_eq!(a, bootstrap_ci(&pairs, 0.05, 1000, 7).unwrap());
    assert_ne!(a, bootstrap_ci(&pairs, 0.05, 1000, 8).unwrap());
    let (e, r) = pairs.iter().fold((0, 0), |s, p| (s.0 + p.0, s.1 + p.1));
    let point = e as f64 / r as f64;
    assert!(a.0 < point && point < a.1, "{a:?} around {point}");
}

#[test]
fn error_free_corpus_has_a_zero_interval() {
    let pairs: Vec<(usize, usize)> = (1..50).map(|n| (0, n)).collect();
    assert_eq!(bootstrap_ci(&pairs, 0.05, 1000, 3).unwrap(), (0.0, 0.0));
}

#[test]
fn paired_comparison() {
    let a: BTreeMap<String, (usize, usize)> = (0..40).map(|i| (format!("u{i}"), (i % 2, 5))).collect();
    let b: BTreeMap<String, (usize, usize)> = (0..40).map(|i| (format!("u{i}"), (i % 2 + 1, 5))).collect();
    assert_eq!(bootstrap_compare(&a, &b, 1000, 1).unwrap(), 0.0);
    assert_eq!(bootstrap_compare(&b, &a, 1000, 1).unwrap(), 1.0);
    assert_eq!(bootstrap_compare(&a, &a, 1000, 1).unwrap(), 0.5);
    assert_eq!(bootstrap_compare(&a, &b, 1000, 9).unwrap(), bootstrap_compare(&a, &b, 1000, 9).unwrap());
}
