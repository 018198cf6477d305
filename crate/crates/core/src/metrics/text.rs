//! BLEU-4, ROUGE-L and CIDEr over lowercased, punctuation-free word tokens.

use std::collections::BTreeMap;

use super::MetricError;

/// Lowercases, turns ASCII punctuation into spaces and splits on whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c.to_ascii_lowercase() })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub(crate) fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram totals for n = 1..4, plus the
/// candidate length and the closest reference length.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of(candidate: &str, references: &[&str]) -> Self {
        let cand = metric_tokens(candidate);
        let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
        let mut stats = BleuStats { cand_len: cand.len(), ..Default::default() };
        // Closest reference length, shorter on ties.
        stats.ref_len = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let counts = ngram_counts(&cand, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            stats.totals[n - 1] = counts.values().sum();
            stats.matches[n - 1] = counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn accumulate(&mut self, other: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// Unsmoothed BLEU-4: zero if any precision is zero.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4).map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln()).sum::<f64>() / 4.0;
        let bp = if self.cand_len >= self.ref_len { 1.0 } else { (1.0 - self.ref_len as f64 / self.cand_len as f64).exp() };
        bp * log_p.exp()
    }
}

/// Sentence-level BLEU-4 with brevity penalty.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    BleuStats::of(candidate, references).score()
}

/// Corpus BLEU-4 from pooled n-gram statistics.
pub fn corpus_bleu4(pairs: &[(&str, Vec<&str>)]) -> f64 {
    let mut total = BleuStats::default();
    for (c, refs) in pairs {
        total.accumulate(&BleuStats::of(c, refs));
    }
    total.score()
}

pub const ROUGE_BETA: f64 = 1.2;

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with β = 1.2.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (metric_tokens(candidate), metric_tokens(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, rec) = (lcs / c.len() as f64, lcs / r.len() as f64);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Document frequencies of the n-grams (n = 1..4) of a reference corpus,
/// where a document is the set of references of one item.
#[derive(Clone, Debug)]
pub struct CiderIdf {
    doc_freq: [BTreeMap<Vec<String>, usize>; 4],
    num_docs: usize,
}

impl CiderIdf {
    pub fn new(reference_sets: &[Vec<&str>]) -> Result<Self, MetricError> {
        if reference_sets.is_empty() {
            return Err(MetricError::EmptyCorpus);
        }
        let mut doc_freq: [BTreeMap<Vec<String>, usize>; 4] = Default::default();
        for refs in reference_sets {
            let toks: Vec<Vec<String>> = refs.iter().map(|r| metric_tokens(r)).collect();
            for (n, df) in doc_freq.iter_mut().enumerate() {
                let mut seen = std::collections::BTreeSet::new();
                for t in &toks {
                    for g in ngram_counts(t, n + 1).into_keys() {
                        seen.insert(g.iter().map(|s| s.to_string()).collect::<Vec<_>>());
                    }
                }
                for g in seen {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(Self { doc_freq, num_docs: reference_sets.len() })
    }

    fn vector<'t>(&self, tokens: &'t [String], n: usize) -> BTreeMap<Vec<&'t str>, f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                let key: Vec<String> = g.iter().map(|s| s.to_string()).collect();
                let df = self.doc_freq[n - 1].get(&key).copied().unwrap_or(0).max(1);
                let idf = (self.num_docs as f64).ln() - (df as f64).ln();
                (g, c as f64 / total as f64 * idf)
            })
            .collect()
    }

    /// Original CIDEr: mean over n = 1..4 of the mean TF-IDF cosine against
    /// each reference, times 10.
    pub fn score(&self, candidate: &str, references: &[&str]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let cand = metric_tokens(candidate);
        let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
        let mut total = 0.0;
        for n in 1..=4 {
            let vc = self.vector(&cand, n);
            let norm_c = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut per_n = 0.0;
            for r in &refs {
                let vr = self.vector(r, n);
                let norm_r = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                if norm_c > 0.0 && norm_r > 0.0 {
                    let dot: f64 = vc.iter().filter_map(|(g, a)| vr.get(g).map(|b| a * b)).sum();
                    per_n += dot / (norm_c * norm_r);
                }
            }
            total += per_n / refs.len() as f64;
        }
        10.0 * total / 4.0
    }
}

/// Per-pair CIDEr with IDF taken from the pairs' own references, plus the mean.
pub fn cider(pairs: &[(&str, Vec<&str>)]) -> Result<(Vec<f64>, f64), MetricError> {
    let refs: Vec<Vec<&str>> = pairs.iter().map(|(_, r)| r.clone()).collect();
    let idf = CiderIdf::new(&refs)?;
    let scores: Vec<f64> = pairs.iter().map(|(c, r)| idf.score(c, r)).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}
