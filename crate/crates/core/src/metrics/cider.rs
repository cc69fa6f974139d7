use std::collections::{HashMap, HashSet};

use super::ngrams;
use crate::error::{Error, Result};

const SIGMA: f64 = 6.0;

type NgramVec<'a> = HashMap<&'a [String], f64>;

/// Document frequencies over per-image reference sets.
#[derive(Debug, Clone)]
pub struct CiderCorpus {
    doc_freq: HashMap<Vec<String>, f64>,
    log_docs: f64,
}

impl CiderCorpus {
    pub fn new(reference_sets: &[Vec<Vec<String>>]) -> Result<Self> {
        if reference_sets.len() < 2 {
            return Err(Error::contract("CIDEr-D needs a corpus of at least two reference sets"));
        }
        let mut doc_freq: HashMap<Vec<String>, f64> = HashMap::new();
        for refs in reference_sets {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in refs {
                for n in 1..=4 {
                    seen.extend(ngrams(r, n));
                }
            }
            for g in seen {
                *doc_freq.entry(g.to_vec()).or_default() += 1.0;
            }
        }
        Ok(Self {
            doc_freq,
            log_docs: (reference_sets.len() as f64).ln(),
        })
    }

    pub fn idf(&self, ngram: &[String]) -> f64 {
        let df = self.doc_freq.get(ngram).copied().unwrap_or(0.0);
        self.log_docs - df.max(1.0).ln()
    }

    fn vectorize<'a>(&self, tokens: &'a [String]) -> ([NgramVec<'a>; 4], [f64; 4]) {
        let mut vecs: [NgramVec<'a>; 4] = Default::default();
        let mut norms = [0.0; 4];
        for n in 1..=4 {
            let mut tf: NgramVec<'a> = HashMap::new();
            for g in ngrams(tokens, n) {
                *tf.entry(g).or_default() += 1.0;
            }
            for (g, count) in tf {
                let w = count * self.idf(g);
                norms[n - 1] += w * w;
                vecs[n - 1].insert(g, w);
            }
            norms[n - 1] = norms[n - 1].sqrt();
        }
        (vecs, norms)
    }

    /// CIDEr-D of one candidate against its references (×10 scale).
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let (hv, hn) = self.vectorize(candidate);
        let mut per_n = [0.0; 4];
        for r in references {
            let (rv, rn) = self.vectorize(r);
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            for n in 0..4 {
                let mut val: f64 = hv[n]
                    .iter()
                    .map(|(g, &h)| {
                        let rw = rv[n].get(g).copied().unwrap_or(0.0);
                        h.min(rw) * rw
                    })
                    .sum();
                if hn[n] != 0.0 && rn[n] != 0.0 {
                    val /= hn[n] * rn[n];
                }
                per_n[n] += val * penalty;
            }
        }
        let mean = per_n.iter().sum::<f64>() / 4.0;
        mean / references.len() as f64 * 10.0
    }
}

/// Per-sentence CIDEr-D with document frequencies taken from `references`.
pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::contract("one reference set per candidate required"));
    }
    let corpus = CiderCorpus::new(references)?;
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| corpus.score(c, r))
        .collect())
}
