use crate::error::{Error, Result};

const BETA: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with β = 1.2, best over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::contract("ROUGE-L needs at least one reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let best = references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let (p, rec) = (lcs / candidate.len() as f64, lcs / r.len() as f64);
            (1.0 + BETA * BETA) * p * rec / (rec + BETA * BETA * p)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;

    #[test]
    fn identical_and_disjoint() {
        let s = tokenize("a red circle and blue bar");
        assert!((rouge_l(&s, &[s.clone()]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&s, &[tokenize("x y z")]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[], &[s]).unwrap(), 0.0);
    }

    #[test]
    fn hand_lcs_example() {
        let c = tokenize("a c e");
        let r = tokenize("a b c d e");
        assert_eq!(lcs_len(&c, &r), 3);
        let (p, rec) = (1.0, 0.6);
        let want = (1.0 + 1.44) * p * rec / (rec + 1.44 * p);
        assert!((rouge_l(&c, &[r]).unwrap() - want).abs() < 1e-12);
    }
}
