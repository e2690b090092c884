//! Sentence and corpus BLEU-4 over SPARQL text.

use std::collections::HashMap;

pub const MAX_ORDER: usize = 4;

const PUNCT: &[char] = &['{', '}', '(', ')', '.', ',', ';'];

/// Whitespace tokens after padding SPARQL punctuation with spaces.
pub fn tokenize(query: &str) -> Vec<String> {
    let mut padded = String::with_capacity(query.len() + 16);
    for c in query.chars() {
        if PUNCT.contains(&c) {
            padded.push(' ');
            padded.push(c);
            padded.push(' ');
        } else {
            padded.push(c);
        }
    }
    padded.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram totals per order, plus lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn of(candidate: &str, reference: &str) -> Self {
        let cand = tokenize(candidate);
        let refr = tokenize(reference);
        let mut s = BleuStats {
            candidate_len: cand.len(),
            reference_len: refr.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let c = ngram_counts(&cand, n);
            let r = ngram_counts(&refr, n);
            s.totals[n - 1] = cand.len().saturating_sub(n - 1);
            s.matches[n - 1] = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for i in 0..MAX_ORDER {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// Geometric mean of unigram precision and add-one smoothed higher-order
    /// precisions, times the brevity penalty, on a 0–100 scale.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..MAX_ORDER {
            log_sum += ((self.matches[n] as f64 + 1.0) / (self.totals[n] as f64 + 1.0)).ln();
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        (100.0 * bp * (log_sum / MAX_ORDER as f64).exp()).clamp(0.0, 100.0)
    }
}

pub fn bleu(candidate: &str, reference: &str) -> f64 {
    BleuStats::of(candidate, reference).score()
}

/// Corpus BLEU from n-gram counts and lengths pooled over all pairs.
pub fn corpus_bleu<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let mut total = BleuStats::default();
    for (c, r) in pairs {
        total.add(&BleuStats::of(c, r));
    }
    total.score()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization_pads_punctuation() {
        assert_eq!(
            tokenize("SELECT ?x WHERE {?x wdt:P31 wd:Q5.}"),
            ["SELECT", "?x", "WHERE", "{", "?x", "wdt:P31", "wd:Q5", ".", "}"]
        );
        assert_eq!(tokenize("COUNT(?x)"), ["COUNT", "(", "?x", ")"]);
    }

    #[test]
    fn identity_empty_and_disjoint() {
        let q = "SELECT ?x WHERE { ?x wdt:P31 wd:Q5 }";
        assert_eq!(bleu(q, q), 100.0);
        assert_eq!(bleu("", q), 0.0);
        assert_eq!(bleu("", ""), 0.0);
        assert_eq!(bleu("foo bar", q), 0.0);
        assert_eq!(bleu(q, "SELECT  ?x\nWHERE {?x wdt:P31 wd:Q5}"), 100.0);
    }

    #[test]
    fn short_candidate_hand_computed() {
        // cand "a b" vs ref "a b c": p1 = 2/2, p2 = (1+1)/(1+1), p3 = p4 = 1/1,
        // bp = exp(1 - 3/2)
        let expected = 100.0 * (1.0f64 - 1.5).exp();
        assert!((bleu("a b", "a b c") - expected).abs() < 1e-12);
    }

    #[test]
    fn pooled_and_mean_diverge() {
        // pair 1: identical 4 tokens -> 100
        // pair 2: "x" vs "y y": no unigram match -> 0
        // pooled: m = [4,3,2,1], t = [5,3,2,1], c = 5, r = 6
        let pairs = [("a b c d", "a b c d"), ("x", "y y")];
        let pooled = corpus_bleu(pairs);
        let p = [4.0 / 5.0, 4.0 / 4.0, 3.0 / 3.0, 2.0 / 2.0];
        let expected = 100.0 * (1.0f64 - 6.0 / 5.0).exp() * (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();
        assert!((pooled - expected).abs() < 1e-9);
        let mean = (bleu(pairs[0].0, pairs[0].1) + bleu(pairs[1].0, pairs[1].1)) / 2.0;
        assert!((mean - 50.0).abs() < 1e-12);
        assert!((pooled - mean).abs() > 1.0);
    }

    #[test]
    fn single_pair_corpus_equals_sentence() {
        let (c, r) = ("SELECT ?a WHERE { ?a wdt:P17 wd:Q1 }", "SELECT ?x WHERE { ?x wdt:P17 wd:Q1 }");
        assert_eq!(corpus_bleu([(c, r)]), bleu(c, r));
        assert_eq!(corpus_bleu([(r, r), (c, c)]), 100.0);
    }
}
