//! Cosine-similarity reward over report embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::corpus::format_report;

/// Embeds texts. All texts passed in one call share one vector space.
pub trait ReportEncoder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MetricError>;
}

/// Bag of n-gram counts over lowercased words, with punctuation marks kept
/// as separate tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfCosineEncoder {
    pub orders: BTreeSet<usize>,
    pub lowercase: bool,
}

impl Default for TfCosineEncoder {
    fn default() -> Self {
        Self { orders: [1, 2].into(), lowercase: true }
    }
}

impl TfCosineEncoder {
    pub fn unigram() -> Self {
        Self { orders: [1].into(), ..Self::default() }
    }

    fn tokens(&self, text: &str) -> Vec<String> {
        let mut spaced = String::with_capacity(text.len() + 8);
        for c in text.chars() {
            if c.is_ascii_punctuation() {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            } else if self.lowercase {
                spaced.extend(c.to_lowercase());
            } else {
                spaced.push(c);
            }
        }
        spaced.split_whitespace().map(str::to_string).collect()
    }

    fn counts(&self, text: &str) -> BTreeMap<String, f64> {
        let toks = self.tokens(text);
        let mut counts = BTreeMap::new();
        for &n in &self.orders {
            if n == 0 || toks.len() < n {
                continue;
            }
            for w in toks.windows(n) {
                *counts.entry(w.join("\u{1}")).or_insert(0.0) += 1.0;
            }
        }
        counts
    }
}

impl ReportEncoder for TfCosineEncoder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MetricError> {
        let counts: Vec<BTreeMap<String, f64>> = texts.iter().map(|t| self.counts(t)).collect();
        let vocab: BTreeSet<&String> = counts.iter().flat_map(|c| c.keys()).collect();
        Ok(counts.iter().map(|c| vocab.iter().map(|g| c.get(*g).copied().unwrap_or(0.0)).collect()).collect())
    }
}

/// Client of an external embedding service: `POST {endpoint}` with
/// `{"texts": [...]}`, answered by `{"embeddings": [[...], ...]}`.
#[derive(Clone, Debug)]
pub struct HttpEncoder {
    endpoint: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

impl HttpEncoder {
    /// `url` is either the service root or the full `/embed` address.
    pub fn new(url: &str, timeout: Duration) -> Self {
        let trimmed = url.trim_end_matches('/');
        let endpoint = if trimmed.ends_with("/embed") { trimmed.to_string() } else { format!("{trimmed}/embed") };
        Self { endpoint, agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl ReportEncoder for HttpEncoder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MetricError> {
        let err = |m: String| MetricError::Encoder(format!("{}: {m}", self.endpoint));
        let resp: EmbedResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| err(e.to_string()))?
            .into_json()
            .map_err(|e| err(format!("bad response body: {e}")))?;
        if resp.embeddings.len() != texts.len() {
            return Err(err(format!("{} embeddings for {} texts", resp.embeddings.len(), texts.len())));
        }
        let dim = resp.embeddings.first().map_or(0, Vec::len);
        if dim == 0 || resp.embeddings.iter().any(|e| e.len() != dim) {
            return Err(err("embeddings are empty or differ in dimension".into()));
        }
        if resp.embeddings.iter().flatten().any(|v| !v.is_finite()) {
            return Err(err("non-finite embedding entry".into()));
        }
        Ok(resp.embeddings)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFlag {
    EmptyText,
    ZeroNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub value: f64,
    pub flag: Option<RewardFlag>,
}

/// Whole-report text: findings and impression joined by one space.
pub fn report_text(findings: &str, impression: &str) -> String {
    format_report(&format!("{findings} {impression}"))
}

/// Cosine of the two embeddings. Empty texts and zero-norm embeddings give 0
/// with a flag.
pub fn cosine_reward(generated: &str, reference: &str, encoder: &dyn ReportEncoder) -> Result<Reward, MetricError> {
    let (g, r) = (format_report(generated), format_report(reference));
    if g.is_empty() || r.is_empty() {
        return Ok(Reward { value: 0.0, flag: Some(RewardFlag::EmptyText) });
    }
    let emb = encoder.embed(&[&g, &r])?;
    let [a, b] = emb.as_slice() else {
        return Err(MetricError::Encoder(format!("expected 2 embeddings, got {}", emb.len())));
    };
    if a.len() != b.len() {
        return Err(MetricError::Encoder("embedding dimensions differ".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Reward { value: 0.0, flag: Some(RewardFlag::ZeroNorm) });
    }
    let value = (dot / (na * nb)).clamp(-1.0, 1.0);
    if !value.is_finite() {
        return Err(MetricError::NonFiniteReward);
    }
    Ok(Reward { value, flag: None })
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn tf_cosine_is_symmetric_and_bounded(a in "[a-d .]{0,40}", b in "[a-d .]{0,40}") {
            let enc = TfCosineEncoder::default();
            let x = cosine_reward(&a, &b, &enc).unwrap().value;
            let y = cosine_reward(&b, &a, &enc).unwrap().value;
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        }
    }
}
