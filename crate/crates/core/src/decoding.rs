//! Greedy search, beam search and top-k sampling.

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::model::{DecoderSession, EncodedStudy, InferenceModel, ModelError};
use crate::seeding::rng_from;
use crate::tensor::log_softmax;
use crate::tokenizer::{Section, Specials, TokenStream};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
    TopK,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "top_k" | "topk" => Ok(Strategy::TopK),
            other => Err(format!("unknown strategy `{other}` (greedy, beam, top_k)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beams: usize,
    pub k: usize,
    /// Length cap of the emitted sequence, [BOS] included.
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Greedy, beams: 4, k: 50, max_new_tokens: 256, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn beam(beams: usize) -> Self {
        Self { strategy: Strategy::Beam, beams, ..Self::default() }
    }

    pub fn top_k(k: usize, seed: u64) -> Self {
        Self { strategy: Strategy::TopK, k, seed, ..Self::default() }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), DecodeError> {
        if self.beams == 0 {
            return Err(DecodeError::InvalidConfig("beams must be at least 1".into()));
        }
        if self.strategy == Strategy::TopK && (self.k == 0 || self.k > vocab_size) {
            return Err(DecodeError::InvalidConfig(format!("k = {} must lie in 1..={vocab_size}", self.k)));
        }
        if self.max_new_tokens == 0 {
            return Err(DecodeError::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that can consume tokens and report next-token logits.
pub trait StepSession: Clone {
    fn extend(&mut self, ids: &[u32], sections: &[u8]) -> Result<Vec<f64>, ModelError>;

    /// Positions still available.
    fn remaining(&self) -> usize {
        usize::MAX
    }
}

impl StepSession for DecoderSession<'_> {
    fn extend(&mut self, ids: &[u32], sections: &[u8]) -> Result<Vec<f64>, ModelError> {
        DecoderSession::extend(self, ids, sections)
    }

    fn remaining(&self) -> usize {
        self.capacity() - self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    /// Emitted tokens, starting with [BOS].
    pub ids: Vec<u32>,
    pub sections: Vec<u8>,
    /// Ended with [EOS].
    pub finished: bool,
    /// Σ log p of the tokens after [BOS] under the decoding distribution.
    pub log_prob: f64,
}

#[derive(Clone)]
struct Hypothesis<S> {
    session: S,
    ids: Vec<u32>,
    sections: Vec<u8>,
    log_prob: f64,
    logits: Vec<f64>,
}

impl<S> Hypothesis<S> {
    fn section_after(&self, token: u32, specials: &Specials) -> u8 {
        let cur = *self.sections.last().expect("hypotheses start with [BOS]");
        if token == specials.sep || cur == Section::Impression as u8 {
            Section::Impression as u8
        } else {
            Section::Findings as u8
        }
    }

    fn into_generated(self, finished: bool) -> Generated {
        Generated { ids: self.ids, sections: self.sections, finished, log_prob: self.log_prob }
    }
}

/// Log-probabilities with tokens that may not be generated pushed to −∞.
fn step_log_probs(logits: &[f64], specials: &Specials) -> Vec<f64> {
    let mut masked = logits.to_vec();
    for id in [specials.pmt, specials.pmt_sep, specials.bos, specials.npf, specials.npi, specials.pad] {
        if let Some(v) = masked.get_mut(id as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
    log_softmax(&masked)
}

/// Index of the largest value, lowest index on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values in descending order, lower index first on ties.
pub(crate) fn top_indices(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Decodes a continuation of `prompt` starting from [BOS]. `session` must be empty.
pub fn generate<S: StepSession>(
    mut session: S,
    prompt: &TokenStream,
    specials: &Specials,
    cfg: &DecodeConfig,
) -> Result<Generated, DecodeError> {
    let mut ids = prompt.token_ids.clone();
    let mut sections = prompt.section_ids.clone();
    ids.push(specials.bos);
    sections.push(Section::Findings as u8);
    let logits = session.extend(&ids, &sections)?;
    cfg.validate(logits.len())?;
    let max_len = cfg.max_new_tokens.min(session.remaining().saturating_add(1));
    let start = Hypothesis {
        session,
        ids: vec![specials.bos],
        sections: vec![Section::Findings as u8],
        log_prob: 0.0,
        logits,
    };
    match cfg.strategy {
        Strategy::Greedy => sample_path(start, specials, max_len, argmax),
        Strategy::TopK => {
            let mut rng = rng_from(cfg.seed);
            sample_path(start, specials, max_len, |lp| {
                let top = top_indices(lp, cfg.k);
                let weights: Vec<f64> = top.iter().map(|&i| (lp[i] - lp[top[0]]).exp()).collect();
                let dist = WeightedIndex::new(&weights).expect("top-k weights are positive");
                top[dist.sample(&mut rng)]
            })
        }
        Strategy::Beam => beam_search(start, specials, max_len, cfg.beams),
    }
}

fn sample_path<S: StepSession>(
    mut hyp: Hypothesis<S>,
    specials: &Specials,
    max_len: usize,
    mut pick: impl FnMut(&[f64]) -> usize,
) -> Result<Generated, DecodeError> {
    while hyp.ids.len() < max_len {
        let lp = step_log_probs(&hyp.logits, specials);
        let token = pick(&lp) as u32;
        let section = hyp.section_after(token, specials);
        hyp.log_prob += lp[token as usize];
        hyp.ids.push(token);
        hyp.sections.push(section);
        if token == specials.eos {
            return Ok(hyp.into_generated(true));
        }
        if hyp.ids.len() < max_len {
            hyp.logits = hyp.session.extend(&[token], &[section])?;
        }
    }
    Ok(hyp.into_generated(false))
}

fn beam_search<S: StepSession>(
    start: Hypothesis<S>,
    specials: &Specials,
    max_len: usize,
    beams: usize,
) -> Result<Generated, DecodeError> {
    let mut alive = vec![start];
    let mut finished: Option<Hypothesis<S>> = None;
    while !alive.is_empty() && alive[0].ids.len() < max_len {
        // (score, hypothesis index, token); ordered by score, then earlier
        // hypothesis, then lower token id.
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let lp = step_log_probs(&hyp.logits, specials);
            for t in top_indices(&lp, beams) {
                if lp[t].is_finite() {
                    candidates.push((hyp.log_prob + lp[t], h, t as u32));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(beams);
        let mut next = Vec::with_capacity(beams);
        for (score, h, token) in candidates {
            let mut hyp = alive[h].clone();
            let section = hyp.section_after(token, specials);
            hyp.log_prob = score;
            hyp.ids.push(token);
            hyp.sections.push(section);
            if token == specials.eos {
                if finished.as_ref().is_none_or(|f| score > f.log_prob) {
                    finished = Some(hyp);
                }
                continue;
            }
            if hyp.ids.len() < max_len {
                hyp.logits = hyp.session.extend(&[token], &[section])?;
            }
            next.push(hyp);
        }
        alive = next;
        // Scores only decrease, so no live hypothesis can overtake a better finished one.
        if let Some(f) = &finished {
            if alive.first().is_none_or(|a| a.log_prob <= f.log_prob) {
                break;
            }
        }
    }
    match finished {
        Some(f) => Ok(f.into_generated(true)),
        None => Ok(alive.into_iter().next().expect("beam never empties without a finished hypothesis").into_generated(false)),
    }
}

/// Decodes one report for an encoded study with the given prompt.
pub fn generate_report(
    model: &InferenceModel<'_>,
    enc: &EncodedStudy,
    prompt: &TokenStream,
    specials: &Specials,
    cfg: &DecodeConfig,
) -> Result<Generated, DecodeError> {
    generate(model.session(enc), prompt, specials, cfg)
}
