//! Corpus-level BLEU: clipped n-gram precision with uniform weights and
//! the brevity penalty, over whitespace-tokenized text.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Clipped precision per n-gram order, 1..=max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub score: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *out.entry(tokens[i..i + n].to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU. Clipped counts are summed over the whole corpus before
/// dividing; an order without hypothesis n-grams scores zero precision,
/// and any zero precision zeroes the unsmoothed score. `smooth` uses
/// add-one smoothing on every order for tiny corpora.
pub fn bleu(
    hypotheses: &[String],
    references: &[String],
    max_n: usize,
    smooth: bool,
) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::Contract("bleu: empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "bleu: {} hypotheses against {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Contract("bleu: need at least 1-gram precision".into()));
    }

    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, re) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = re.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            for (g, c) in hc {
                matched[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
            }
        }
    }

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if smooth {
                (matched[i] + 1) as f64 / (total[i] + 1) as f64
            } else if total[i] > 0 {
                matched[i] as f64 / total[i] as f64
            } else {
                0.0
            }
        })
        .collect();

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };

    let score = if precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * mean_log.exp()
    };

    Ok(BleuReport { precisions, brevity_penalty, score, hyp_len, ref_len })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owned(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_corpora_score_one() {
        let texts = owned(&["the quick brown fox jumps", "a stitch in time saves nine"]);
        let r = bleu(&texts, &texts, 4, false).unwrap();
        assert_eq!(r.precisions, vec![1.0; 4]);
        assert_eq!(r.brevity_penalty, 1.0);
        assert_eq!(r.score, 1.0);
    }

    #[test]
    fn half_length_hypothesis_pays_the_brevity_penalty() {
        let r = bleu(&owned(&["jumped"]), &owned(&["jumped high"]), 1, false).unwrap();
        assert_eq!(r.precisions, vec![1.0]);
        assert!((r.brevity_penalty - 0.36787944117144233).abs() < 1e-15);
        assert!((r.score - 0.36787944117144233).abs() < 1e-15);
    }

    /// Hand-computed oracle. Clipped counts per order:
    /// matched [14, 9, 7, 5], totals [14, 12, 10, 8]; the second pair
    /// clips "the" (x2 in hypothesis vs x2 in reference) and drops one
    /// word, so the corpus runs one token short of the references.
    #[test]
    fn toy_corpus_matches_the_hand_computation() {
        let hyps = owned(&[
            "the quick brown fox jumps over the dog",
            "the the cat sat on mat",
        ]);
        let refs = owned(&[
            "the quick brown fox jumps over the lazy dog",
            "the cat sat on the mat",
        ]);
        let r = bleu(&hyps, &refs, 4, false).unwrap();
        assert_eq!(r.hyp_len, 14);
        assert_eq!(r.ref_len, 15);
        let expected_p = [1.0, 0.75, 0.7, 0.625];
        for (got, want) in r.precisions.iter().zip(expected_p) {
            assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
        assert!((r.brevity_penalty - 0.9310627797040228).abs() < 1e-12);
        assert!((r.score - 0.7046748890347899).abs() < 1e-12);
    }

    #[test]
    fn missing_higher_order_ngrams_zero_the_score_unless_smoothed() {
        let hyps = owned(&["ab cd"]);
        let refs = owned(&["ab cd"]);
        let plain = bleu(&hyps, &refs, 4, false).unwrap();
        assert_eq!(plain.score, 0.0);
        assert_eq!(plain.precisions[3], 0.0);
        let smoothed = bleu(&hyps, &refs, 4, true).unwrap();
        assert!(smoothed.score > 0.0);
    }

    #[test]
    fn degenerate_corpora_are_rejected() {
        assert!(matches!(bleu(&[], &[], 4, false), Err(Error::Contract(_))));
        let err = bleu(&owned(&["a"]), &owned(&["a", "b"]), 4, false);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
