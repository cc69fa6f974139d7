//! Caption quality metrics and the faithful explanation rate.

mod bleu;
mod cider;
mod fer;
mod report;
mod rouge;

pub use bleu::{bleu4, corpus_bleu4, BleuSmoothing};
pub use cider::{cider_d, CiderCorpus};
pub use fer::{extract_noun_phrase, fer_score, hit_rate, nearest_part, FerImage, FerRecord, FerReport};
pub use report::{evaluate, EvalReport, ImageScores, Metric, ScoredImage};
pub use rouge::{lcs_len, rouge_l};

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_string).collect()
}

pub(crate) fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}
