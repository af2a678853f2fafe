// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::sequence::tokenize_text;

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

/// Unique n-grams over total n-grams of one text; 0 when it has none.
pub fn distinct_n(text: &str, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("distinct-n needs n >= 1".into()));
    }
    Ok(distinct_tokens(&tokenize_text(text), n))
}

fn distinct_tokens(tokens: &[String], n: usize) -> f64 {
    if tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let unique: HashSet<&[String]> = ngrams(tokens, n).collect();
    unique.len() as f64 / total as f64
}

/// Per-caption distinct-n averaged over the corpus.
pub fn mean_distinct_n<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sum = texts
        .iter()
        .map(|t| distinct_n(t.as_ref(), n))
        .sum::<Result<f64>>()?;
    Ok(sum / texts.len() as f64)
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU-4 with uniform weights, clipped counts, and the brevity
/// penalty against the closest reference length. No smoothing.
pub fn sentence_bleu(candidate: &[String], references: &[&[String]]) -> f64 {
    const ORDERS: usize = 4;
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=ORDERS {
        let cand = counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, c) in counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln() / ORDERS as f64;
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("at least one reference");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

/// Mean BLEU of each caption against all the others.
pub fn self_bleu<S: AsRef<str>>(captions: &[S]) -> Result<f64> {
    if captions.len() < 2 {
        return Err(Error::InvalidConfig("self-BLEU needs at least two captions".into()));
    }
    let toks: Vec<Vec<String>> = captions.iter().map(|c| tokenize_text(c.as_ref())).collect();
    let total: f64 = (0..toks.len())
        .map(|i| {
            let refs: Vec<&[String]> = toks
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, t)| t.as_slice())
                .collect();
            sentence_bleu(&toks[i], &refs)
        })
        .sum();
    Ok(total / toks.len() as f64)
}
