//! LFAcc, smoothed sentence BLEU and exact match.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerator substituted for a zero clipped n-gram count.
pub const BLEU_EPSILON: f64 = 1e-9;
const MAX_ORDER: usize = 4;

const OPERATORS: &[&str] = &["<=", ">=", "!="];
const PUNCTUATION: &[char] = &['(', ')', ',', ';', '=', '<', '>', '*'];

/// Lowercases, spaces out `( ) , ; = < > <= >= != *`, collapses whitespace
/// and removes trailing semicolons.
pub fn normalize_sql(s: &str) -> String {
    let lower = s.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut spaced = String::with_capacity(lower.len() + 16);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if let Some(&n) = chars.get(i + 1) {
            let pair: String = [c, n].iter().collect();
            if OPERATORS.contains(&pair.as_str()) {
                spaced.push(' ');
                spaced.push_str(&pair);
                spaced.push(' ');
                i += 2;
                continue;
            }
        }
        if PUNCTUATION.contains(&c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
        i += 1;
    }
    let mut tokens: Vec<&str> = spaced.split_whitespace().collect();
    while tokens.last() == Some(&";") {
        tokens.pop();
    }
    tokens.join(" ")
}

pub fn lfacc(pred: &str, gold: &str) -> bool {
    normalize_sql(pred) == normalize_sql(gold)
}

pub fn corpus_lfacc<P: AsRef<str>, G: AsRef<str>>(pairs: &[(P, G)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no prediction/gold pairs".into()));
    }
    let hits = pairs.iter().filter(|(p, g)| lfacc(p.as_ref(), g.as_ref())).count();
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    pred == gold
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Uniform-weight BLEU up to 4-grams with brevity penalty.
///
/// An order with no prediction n-grams has precision 1 when the reference
/// has none either and `BLEU_EPSILON` otherwise. An empty prediction
/// scores 0; an empty reference is an error.
pub fn bleu_sentence<S: AsRef<str>, T: AsRef<str>>(pred_tokens: &[S], gold_tokens: &[T]) -> Result<f64> {
    if gold_tokens.is_empty() {
        return Err(Error::Invalid("BLEU reference is empty".into()));
    }
    if pred_tokens.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let pred = ngram_counts(pred_tokens, n);
        let gold = ngram_counts(gold_tokens, n);
        let total: usize = pred.values().sum();
        let p = if total == 0 {
            if gold.is_empty() {
                1.0
            } else {
                BLEU_EPSILON
            }
        } else {
            let matched: usize = pred
                .iter()
                .map(|(g, &c)| c.min(gold.get(g).copied().unwrap_or(0)))
                .sum();
            if matched == 0 {
                BLEU_EPSILON / total as f64
            } else {
                matched as f64 / total as f64
            }
        };
        log_sum += p.ln() / MAX_ORDER as f64;
    }
    let (c, r) = (pred_tokens.len() as f64, gold_tokens.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * log_sum.exp())
}

/// BLEU over whitespace tokens of the normalized strings.
pub fn bleu(pred: &str, gold: &str) -> Result<f64> {
    let p = normalize_sql(pred);
    let g = normalize_sql(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    bleu_sentence(&pt, &gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub prediction: String,
    pub gold: String,
    pub normalized_prediction: String,
    pub normalized_gold: String,
    pub lfacc: bool,
    pub bleu: f64,
    pub em: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub lfacc: f64,
    pub bleu: f64,
    pub em: f64,
    pub per_sample: Vec<SampleMetrics>,
}

/// Sum of values in ascending order, so the total ignores input order.
fn ordered_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

pub fn evaluate<P: AsRef<str> + Sync, G: AsRef<str> + Sync>(predictions: &[P], golds: &[G]) -> Result<MetricReport> {
    if predictions.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold queries",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("no prediction/gold pairs".into()));
    }
    let per_sample = predictions
        .par_iter()
        .zip(golds.par_iter())
        .map(|(p, g)| {
            let (p, g) = (p.as_ref(), g.as_ref());
            let normalized_prediction = normalize_sql(p);
            let normalized_gold = normalize_sql(g);
            Ok(SampleMetrics {
                prediction: p.to_string(),
                gold: g.to_string(),
                lfacc: normalized_prediction == normalized_gold,
                bleu: bleu(p, g)?,
                em: exact_match(p, g),
                normalized_prediction,
                normalized_gold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    Ok(MetricReport {
        n_samples: per_sample.len(),
        lfacc: per_sample.iter().filter(|s| s.lfacc).count() as f64 / n,
        em: per_sample.iter().filter(|s| s.em).count() as f64 / n,
        bleu: ordered_sum(per_sample.iter().map(|s| s.bleu).collect()) / n,
        per_sample,
    })
}

/// Plain-text table with one row per labelled report, metrics in percent.
pub fn render_table(rows: &[(String, &MetricReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Model".len());
    let mut out = String::new();
    let _ = writeln!(out, "| {:<width$} | LFAcc (%) | BLEU (%) | EM (%) |", "Model");
    let _ = writeln!(out, "|{}|-----------|----------|--------|", "-".repeat(width + 2));
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "| {:<width$} | {:>9.2} | {:>8.2} | {:>6.2} |",
            label,
            100.0 * r.lfacc,
            100.0 * r.bleu,
            100.0 * r.em
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_examples() {
        assert_eq!(normalize_sql("SELECT Name FROM t ;"), normalize_sql("select name from t"));
        assert_eq!(normalize_sql("a<=b"), "a <= b");
        assert_eq!(normalize_sql("a!=b AND c>=d"), "a != b and c >= d");
        assert_eq!(normalize_sql("SELECT count(*) FROM t;;"), "select count ( * ) from t");
        assert_eq!(normalize_sql("   "), "");
    }

    #[test]
    fn lfacc_examples() {
        assert!(lfacc("select a from t", "select a from t"));
        assert!(lfacc("SELECT  A FROM T", "select a from t"));
        assert!(!lfacc("select a from t", "select b from t"));
        assert_eq!(corpus_lfacc(&[("a", "A"), ("b", "c")]).unwrap(), 0.5);
    }

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("SELECT 1", "SELECT 1"));
        assert!(!exact_match("SELECT 1", "select 1"));
        assert!(!exact_match("SELECT 1 ", "SELECT 1"));
    }

    #[test]
    fn bleu_edge_cases() {
        assert_eq!(bleu_sentence(&["x"], &["x"]).unwrap(), 1.0);
        assert_eq!(bleu_sentence::<&str, &str>(&[], &["x"]).unwrap(), 0.0);
        assert!(bleu_sentence::<&str, &str>(&["x"], &[]).is_err());
        assert!(bleu_sentence(&["a", "b", "c", "d"], &["e", "f", "g", "h"]).unwrap() < 1e-6);
    }

    #[test]
    fn evaluate_identical_is_perfect() {
        let xs = ["SELECT a FROM t", "SELECT count ( * ) FROM t"];
        let r = evaluate(&xs, &xs).unwrap();
        assert_eq!((r.lfacc, r.bleu, r.em), (1.0, 1.0, 1.0));
        assert!(evaluate(&xs, &xs[..1]).is_err());
        let table = render_table(&[("t5".into(), &r)]);
        assert!(table.contains("100.00"));
    }
}
