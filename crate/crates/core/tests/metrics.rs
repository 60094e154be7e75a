mod common;

use common::random_sql;
use lightsql::metrics::{bleu, bleu_sentence, evaluate, exact_match, lfacc, normalize_sql, BLEU_EPSILON};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Naive sentence BLEU: list-based n-gram matching, removing each matched
/// reference n-gram so counts are clipped.
fn naive_bleu(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let p_grams: Vec<&[&str]> = if pred.len() >= n { pred.windows(n).collect() } else { vec![] };
        let mut g_grams: Vec<&[&str]> = if gold.len() >= n { gold.windows(n).collect() } else { vec![] };
        let p = if p_grams.is_empty() {
            if g_grams.is_empty() {
                1.0
            } else {
                BLEU_EPSILON
            }
        } else {
            let mut hits = 0;
            for g in &p_grams {
                if let Some(i) = g_grams.iter().position(|x| x == g) {
                    g_grams.remove(i);
                    hits += 1;
                }
            }
            let num = if hits == 0 { BLEU_EPSILON } else { hits as f64 };
            num / p_grams.len() as f64
        };
        log_p += 0.25 * p.ln();
    }
    let bp = if pred.len() > gold.len() {
        1.0
    } else {
        (1.0 - gold.len() as f64 / pred.len() as f64).exp()
    };
    bp * log_p.exp()
}

#[test]
fn hand_derived_bleu_example() {
    // every n-gram of the prediction occurs in the reference; only the
    // brevity penalty for 4 against 6 tokens applies
    let expected = (1.0f64 - 6.0 / 4.0).exp();
    let got = bleu("select a from t", "select a from t where b").unwrap();
    assert!((got - expected).abs() < 1e-12);
    assert!((got - 0.6065).abs() < 1e-4);
}

#[test]
fn bleu_matches_naive_oracle() {
    let words = ["select", "a", "b", "from", "t", "where", "="];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let draw = |rng: &mut ChaCha8Rng, lo| {
            let n = rng.random_range(lo..9);
            (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>()
        };
        let pred = draw(&mut rng, 0);
        let gold = draw(&mut rng, 1);
        let got = bleu_sentence(&pred, &gold).unwrap();
        let want = naive_bleu(&pred, &gold);
        assert!((got - want).abs() <= 1e-12 * want.max(1e-300), "{pred:?} vs {gold:?}: {got} != {want}");
    }
}

#[test]
fn bleu_of_identical_strings_is_exactly_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..1000 {
        let s = random_sql(&mut rng);
        if normalize_sql(&s).is_empty() {
            continue;
        }
        assert_eq!(bleu(&s, &s).unwrap(), 1.0, "{s:?}");
        checked += 1;
    }
    assert!(checked > 500);
}

#[test]
fn exact_match_implies_lfacc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut em_hits = 0;
    for _ in 0..10_000 {
        let a = random_sql(&mut rng);
        let b = match rng.random_range(0..3) {
            0 => a.clone(),
            1 => a.to_uppercase(),
            _ => random_sql(&mut rng),
        };
        if exact_match(&a, &b) {
            em_hits += 1;
            assert!(lfacc(&a, &b), "{a:?} / {b:?}");
        }
    }
    assert!(em_hits > 3000);
}

#[test]
fn bleu_invariant_under_consistent_token_renaming() {
    let rename = |s: &str| {
        s.split_whitespace()
            .map(|w| format!("<{}>", w.chars().rev().collect::<String>()))
            .collect::<Vec<_>>()
    };
    let pairs = [
        ("select a from t", "select a from t where b"),
        ("select name from singer", "select age from singer"),
        ("select x", "select y from z"),
    ];
    for (p, g) in pairs {
        let (pn, gn) = (normalize_sql(p), normalize_sql(g));
        let direct = bleu(p, g).unwrap();
        let renamed = bleu_sentence(&rename(&pn), &rename(&gn)).unwrap();
        assert_eq!(direct, renamed);
    }
}

#[test]
fn corpus_scores_ignore_pair_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    while golds.len() < 200 {
        let g = random_sql(&mut rng);
        if normalize_sql(&g).is_empty() {
            continue;
        }
        preds.push(if rng.random_bool(0.5) { g.clone() } else { random_sql(&mut rng) });
        golds.push(g);
    }
    let a = evaluate(&preds, &golds).unwrap();
    preds.reverse();
    golds.reverse();
    let b = evaluate(&preds, &golds).unwrap();
    assert_eq!(a.lfacc.to_bits(), b.lfacc.to_bits());
    assert_eq!(a.em.to_bits(), b.em.to_bits());
    assert_eq!(a.bleu.to_bits(), b.bleu.to_bits());
}

#[test]
fn empty_inputs() {
    assert_eq!(bleu("", "select 1").unwrap(), 0.0);
    assert!(bleu("select 1", " ; ").is_err());
    assert!(evaluate::<&str, &str>(&[], &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn normalize_is_idempotent(s in "[ a-zA-Z0-9_().,;*=<>!'\t]{0,40}") {
        let once = normalize_sql(&s);
        prop_assert_eq!(normalize_sql(&once), once);
    }

    #[test]
    fn normalize_is_idempotent_on_sql_fragments(seed in any::<u64>()) {
        let s = random_sql(&mut ChaCha8Rng::seed_from_u64(seed));
        let once = normalize_sql(&s);
        prop_assert_eq!(normalize_sql(&once), once);
    }
}
