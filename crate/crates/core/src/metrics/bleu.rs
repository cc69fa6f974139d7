use std::collections::HashMap;

use super::ngrams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BleuSmoothing {
    #[default]
    None,
    /// Replace a zero n-gram match count by `1/(total + 1)`.
    AddOneOnZero,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counts {
    matched: [usize; 4],
    total: [usize; 4],
    cand_len: usize,
    ref_len: usize,
}

fn counts(candidate: &[String], references: &[Vec<String>]) -> Counts {
    let mut c = Counts {
        cand_len: candidate.len(),
        ..Counts::default()
    };
    for n in 1..=4 {
        let mut cand: HashMap<&[String], usize> = HashMap::new();
        for g in ngrams(candidate, n) {
            *cand.entry(g).or_default() += 1;
        }
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            let mut local: HashMap<&[String], usize> = HashMap::new();
            for g in ngrams(r, n) {
                *local.entry(g).or_default() += 1;
            }
            for (g, k) in local {
                let e = max_ref.entry(g).or_default();
                *e = (*e).max(k);
            }
        }
        c.matched[n - 1] = cand.iter().map(|(g, &k)| k.min(*max_ref.get(g).unwrap_or(&0))).sum();
        c.total[n - 1] = candidate.len().saturating_sub(n - 1);
    }
    // closest reference length, ties to the shorter
    c.ref_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
        .unwrap_or(0);
    c
}

fn combine(c: &Counts, smoothing: BleuSmoothing) -> f64 {
    if c.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = match (c.matched[n], smoothing) {
            (0, BleuSmoothing::None) => return 0.0,
            (0, BleuSmoothing::AddOneOnZero) => 1.0 / (c.total[n] as f64 + 1.0),
            (m, _) => m as f64 / c.total[n] as f64,
        };
        log_sum += p.ln();
    }
    let bp = if c.cand_len > c.ref_len {
        1.0
    } else {
        (1.0 - c.ref_len as f64 / c.cand_len as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

/// Sentence-level BLEU-4 with clipped counts and brevity penalty.
pub fn bleu4(candidate: &[String], references: &[Vec<String>], smoothing: BleuSmoothing) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::contract("BLEU needs at least one reference"));
    }
    Ok(combine(&counts(candidate, references), smoothing))
}

/// Corpus-level BLEU-4: n-gram counts and lengths pooled before combining.
pub fn corpus_bleu4(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<f64> {
    let mut total = Counts::default();
    for (cand, refs) in pairs {
        if refs.is_empty() {
            return Err(Error::contract("BLEU needs at least one reference"));
        }
        let c = counts(cand, refs);
        for n in 0..4 {
            total.matched[n] += c.matched[n];
            total.total[n] += c.total[n];
        }
        total.cand_len += c.cand_len;
        total.ref_len += c.ref_len;
    }
    Ok(combine(&total, BleuSmoothing::None))
}
