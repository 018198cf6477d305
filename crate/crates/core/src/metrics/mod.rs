//! Report metrics, the rule-based observation labeler, and rewards.

mod evaluate;
mod reward;
mod text;

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::templates::{CONDITIONS, NUM_CONDITIONS};

pub use evaluate::{
    evaluate_split, Conditioning, EvalOptions, ModelGenerator, PromptMode, ReportGenerator, ScoreAggregate,
    ScoreReport, StudyScore, Subset,
};
pub use reward::{cosine_reward, report_text, HttpEncoder, ReportEncoder, Reward, RewardFlag, TfCosineEncoder};
pub use text::{bleu4, cider, corpus_bleu4, metric_tokens, rouge_l, BleuStats, CiderIdf, ROUGE_BETA};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("{predicted} predictions for {actual} label sets")]
    LengthMismatch { predicted: usize, actual: usize },
    #[error("study {0} has no predicted reports")]
    NoReports(usize),
    #[error("study-level averaging needs exactly one report per study; study {0} has more")]
    MultipleReports(usize),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("reward encoder: {0}")]
    Encoder(String),
    #[error("reward is not finite")]
    NonFiniteReward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationState {
    Positive,
    Negative,
    Uncertain,
    NoMention,
}

impl ObservationState {
    /// Only a positive mention counts as positive.
    pub fn is_positive(self) -> bool {
        self == ObservationState::Positive
    }

    fn precedence(self) -> u8 {
        match self {
            ObservationState::NoMention => 0,
            ObservationState::Negative => 1,
            ObservationState::Uncertain => 2,
            ObservationState::Positive => 3,
        }
    }
}

pub type ObservationStates = [ObservationState; NUM_CONDITIONS];

fn normalize_sentence(s: &str) -> String {
    let lower = s.trim().trim_end_matches('.').trim().to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    let words = match words.as_slice() {
        ["there", "is" | "are", rest @ ..] if !rest.is_empty() => rest,
        all => all,
    };
    words.join(" ")
}

fn sentence_table() -> &'static HashMap<String, (usize, ObservationState)> {
    static TABLE: OnceLock<HashMap<String, (usize, ObservationState)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = HashMap::new();
        for (c, tpl) in CONDITIONS.iter().enumerate() {
            t.insert(normalize_sentence(tpl.positive), (c, ObservationState::Positive));
            t.insert(normalize_sentence(tpl.summary), (c, ObservationState::Positive));
            t.insert(normalize_sentence(tpl.uncertain), (c, ObservationState::Uncertain));
            if let Some(neg) = tpl.negative {
                t.insert(normalize_sentence(neg), (c, ObservationState::Negative));
            }
        }
        t
    })
}

/// Labels a report by looking up each sentence in the template bank. A
/// leading "There is"/"There are" is ignored, so "No pneumothorax." and
/// "There is no pneumothorax." read the same. When a condition is mentioned
/// more than once, positive beats uncertain beats negative.
pub fn label_extract(text: &str) -> ObservationStates {
    let table = sentence_table();
    let mut states = [ObservationState::NoMention; NUM_CONDITIONS];
    for sentence in text.split('.') {
        if let Some(&(c, state)) = table.get(&normalize_sentence(sentence)) {
            if state.precedence() > states[c].precedence() {
                states[c] = state;
            }
        }
    }
    states
}

/// Binary label vector from observation states.
pub fn positives(states: &ObservationStates) -> [bool; NUM_CONDITIONS] {
    states.map(ObservationState::is_positive)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// One report per study.
    StudyLevelMulti,
    /// Several reports per study (one per image); their TP/FP/FN are
    /// averaged within the study first.
    PerImageThenStudy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Macro-averaged F1, precision and recall over the observations.
pub fn macro_prf(
    predicted: &[Vec<ObservationStates>],
    actual: &[ObservationStates],
    averaging: Averaging,
) -> Result<Prf, MetricError> {
    if predicted.len() != actual.len() {
        return Err(MetricError::LengthMismatch { predicted: predicted.len(), actual: actual.len() });
    }
    let mut tp = [0.0; NUM_CONDITIONS];
    let mut fp = [0.0; NUM_CONDITIONS];
    let mut fneg = [0.0; NUM_CONDITIONS];
    for (s, (reports, truth)) in predicted.iter().zip(actual).enumerate() {
        if reports.is_empty() {
            return Err(MetricError::NoReports(s));
        }
        if averaging == Averaging::StudyLevelMulti && reports.len() != 1 {
            return Err(MetricError::MultipleReports(s));
        }
        let w = 1.0 / reports.len() as f64;
        for report in reports {
            for c in 0..NUM_CONDITIONS {
                match (report[c].is_positive(), truth[c].is_positive()) {
                    (true, true) => tp[c] += w,
                    (true, false) => fp[c] += w,
                    (false, true) => fneg[c] += w,
                    (false, false) => {}
                }
            }
        }
    }
    let k = NUM_CONDITIONS as f64;
    let mut out = Prf { f1: 0.0, precision: 0.0, recall: 0.0 };
    for c in 0..NUM_CONDITIONS {
        out.f1 += ratio(2.0 * tp[c], 2.0 * tp[c] + fp[c] + fneg[c]);
        out.precision += ratio(tp[c], tp[c] + fp[c]);
        out.recall += ratio(tp[c], tp[c] + fneg[c]);
    }
    Ok(Prf { f1: out.f1 / k, precision: out.precision / k, recall: out.recall / k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::templates::{render_findings, render_impression};
    use crate::corpus::{generate_corpus, GeneratorConfig, SplitName, SplitSizes};
    use ObservationState::*;

    fn from_bools(b: &[bool]) -> ObservationStates {
        let mut s = [NoMention; NUM_CONDITIONS];
        for (i, &on) in b.iter().enumerate() {
            s[i] = if on { Positive } else { Negative };
        }
        s
    }

    #[test]
    fn template_rules() {
        let pneumothorax = CONDITIONS.iter().position(|c| c.name == "pneumothorax").unwrap();
        assert_eq!(label_extract("No pneumothorax.")[pneumothorax], Negative);
        assert_eq!(label_extract("There is no pneumothorax.")[pneumothorax], Negative);
        assert_eq!(label_extract(""), [NoMention; NUM_CONDITIONS]);
        assert_eq!(label_extract(CONDITIONS[1].uncertain)[1], Uncertain);
        assert_eq!(label_extract(&format!("{} {}", CONDITIONS[1].uncertain, CONDITIONS[1].positive))[1], Positive);
        assert_eq!(label_extract("the heart is ENLARGED .  ")[1], Positive);
    }

    #[test]
    fn normalized_sentences_never_conflict() {
        let mut seen: HashMap<String, (usize, ObservationState)> = HashMap::new();
        for (c, t) in CONDITIONS.iter().enumerate() {
            let entries = [(t.positive, Positive), (t.summary, Positive), (t.uncertain, Uncertain)];
            for (text, state) in entries.into_iter().chain(t.negative.map(|n| (n, Negative))) {
                let prev = seen.insert(normalize_sentence(text), (c, state));
                assert!(prev.is_none() || prev == Some((c, state)), "{text}");
            }
        }
        assert_eq!(sentence_table().len(), seen.len());
    }

    #[test]
    fn every_corpus_study_is_labelled_exactly() {
        let cfg = GeneratorConfig {
            patients: SplitSizes { train: 300, validation: 0, test: 0 },
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for p in corpus.split(SplitName::Train) {
            for s in &p.studies {
                assert_eq!(positives(&label_extract(&s.findings)).to_vec(), s.labels);
                assert_eq!(positives(&label_extract(&s.impression)).to_vec(), s.labels);
            }
        }
        let mut labels = [false; NUM_CONDITIONS];
        for c in 0..NUM_CONDITIONS {
            labels[c] = true;
            assert_eq!(positives(&label_extract(&render_findings(&labels))), labels);
            assert_eq!(positives(&label_extract(&render_impression(&labels))), labels);
        }
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let truth: Vec<ObservationStates> = (0..3).map(|i| from_bools(&[i % 2 == 0; NUM_CONDITIONS])).collect();
        let pred: Vec<Vec<ObservationStates>> = truth.iter().map(|t| vec![*t]).collect();
        let prf = macro_prf(&pred, &truth, Averaging::StudyLevelMulti).unwrap();
        assert_eq!((prf.f1, prf.precision, prf.recall), (1.0, 1.0, 1.0));

        let truth = vec![[Positive; NUM_CONDITIONS]; 3];
        let pred = vec![vec![[Negative; NUM_CONDITIONS]]; 3];
        let prf = macro_prf(&pred, &truth, Averaging::StudyLevelMulti).unwrap();
        assert_eq!((prf.f1, prf.precision, prf.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn three_study_hand_count() {
        // Only conditions 0 and 1 carry positives.
        let mk = |a: ObservationState, b: ObservationState| {
            let mut s = [NoMention; NUM_CONDITIONS];
            s[0] = a;
            s[1] = b;
            s
        };
        let truth = vec![mk(Positive, Negative), mk(Positive, Positive), mk(Negative, Positive)];
        let pred = vec![vec![mk(Positive, Positive)], vec![mk(Uncertain, Positive)], vec![mk(Positive, NoMention)]];
        // c0: TP 1, FP 1, FN 1 -> P 1/2, R 1/2, F1 1/2.
        // c1: TP 1, FP 1, FN 1 -> same.
        let prf = macro_prf(&pred, &truth, Averaging::StudyLevelMulti).unwrap();
        let k = NUM_CONDITIONS as f64;
        assert!((prf.f1 - 1.0 / k).abs() < 1e-15);
        assert!((prf.precision - 1.0 / k).abs() < 1e-15);
        assert!((prf.recall - 1.0 / k).abs() < 1e-15);
    }

    #[test]
    fn per_image_averaging_weights_each_study_once() {
        let truth = vec![[Positive; NUM_CONDITIONS]];
        // Two of three image reports positive: TP 2/3, FN 1/3 per condition.
        let pred = vec![vec![[Positive; NUM_CONDITIONS], [Positive; NUM_CONDITIONS], [Negative; NUM_CONDITIONS]]];
        let prf = macro_prf(&pred, &truth, Averaging::PerImageThenStudy).unwrap();
        assert!((prf.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((prf.precision - 1.0).abs() < 1e-12);
        assert!((prf.f1 - 0.8).abs() < 1e-12);
        assert!(matches!(macro_prf(&pred, &truth, Averaging::StudyLevelMulti), Err(MetricError::MultipleReports(0))));
        assert!(matches!(macro_prf(&pred, &[], Averaging::PerImageThenStudy), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn macro_prf_ignores_study_order() {
        let truth: Vec<ObservationStates> =
            (0..6).map(|i| from_bools(&(0..NUM_CONDITIONS).map(|c| (c + i) % 3 == 0).collect::<Vec<_>>())).collect();
        let pred: Vec<Vec<ObservationStates>> = (0..6)
            .map(|i| vec![from_bools(&(0..NUM_CONDITIONS).map(|c| (c * i) % 4 == 0).collect::<Vec<_>>())])
            .collect();
        let a = macro_prf(&pred, &truth, Averaging::StudyLevelMulti).unwrap();
        let mut order: Vec<usize> = (0..6).collect();
        order.reverse();
        order.swap(1, 4);
        let p2: Vec<_> = order.iter().map(|&i| pred[i].clone()).collect();
        let t2: Vec<_> = order.iter().map(|&i| truth[i]).collect();
        let b = macro_prf(&p2, &t2, Averaging::StudyLevelMulti).unwrap();
        assert!((a.f1 - b.f1).abs() < 1e-15 && (a.precision - b.precision).abs() < 1e-15);
    }
}
