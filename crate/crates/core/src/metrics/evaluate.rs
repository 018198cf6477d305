//! Split-level evaluation: generate a report per study and score it.

use serde::{Deserialize, Serialize};

use super::reward::{cosine_reward, report_text, ReportEncoder};
use super::text::{bleu4, corpus_bleu4, rouge_l, CiderIdf};
use super::{label_extract, macro_prf, Averaging, MetricError, ObservationState, ObservationStates, Prf};
use crate::corpus::{ImageGrid, PatientRecord, StudyRecord, NUM_CONDITIONS};
use crate::decoding::{generate_report, DecodeConfig};
use crate::model::{encode_images, prepare_images, InferenceModel, ModelState};
use crate::tokenizer::{assemble_prompt, split_sections, SectionFlags, SplitReport, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// One image per generated report; a study's scores are the mean over its images.
    SingleImage,
    MultiImage,
    /// All images plus the previous study's report as prompt.
    Longitudinal,
}

impl std::str::FromStr for Conditioning {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "single_image" => Ok(Conditioning::SingleImage),
            "multi" | "multi_image" => Ok(Conditioning::MultiImage),
            "longitudinal" => Ok(Conditioning::Longitudinal),
            other => Err(format!("unknown conditioning `{other}` (single, multi, longitudinal)")),
        }
    }
}

/// Where a longitudinal model's prompt comes from at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Always the no-previous placeholders.
    Sentinel,
    /// The radiologist report of the previous study.
    Radiologist,
    /// The model's own report for the previous study.
    Generated,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentinel" | "none" => Ok(PromptMode::Sentinel),
            "radiologist" => Ok(PromptMode::Radiologist),
            "generated" => Ok(PromptMode::Generated),
            other => Err(format!("unknown prompt mode `{other}` (sentinel, radiologist, generated)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    /// Only studies that have a previous study.
    HasPrevious,
}

impl std::str::FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Subset::All),
            "has-previous" | "has_previous" => Ok(Subset::HasPrevious),
            other => Err(format!("unknown subset `{other}` (all, has-previous)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub conditioning: Conditioning,
    pub prompt_mode: PromptMode,
    pub subset: Subset,
}

impl EvalOptions {
    pub fn new(conditioning: Conditioning) -> Self {
        let prompt_mode = if conditioning == Conditioning::Longitudinal { PromptMode::Radiologist } else { PromptMode::Sentinel };
        Self { conditioning, prompt_mode, subset: Subset::All }
    }
}

/// Produces a report for a set of images and an optional previous report.
pub trait ReportGenerator {
    fn generate(&mut self, study: &StudyRecord, images: &[ImageGrid], prompt: Option<(&str, &str)>) -> Result<SplitReport, MetricError>;
}

/// Decodes with a trained model; images are center-cropped to the model input.
pub struct ModelGenerator<'a> {
    model: InferenceModel<'a>,
    vocab: &'a Vocabulary,
    decode: DecodeConfig,
    max_prompt: usize,
}

impl<'a> ModelGenerator<'a> {
    pub fn new(state: &'a ModelState, vocab: &'a Vocabulary, decode: DecodeConfig, max_prompt: usize) -> Self {
        Self { model: InferenceModel::new(state), vocab, decode, max_prompt }
    }
}

impl ReportGenerator for ModelGenerator<'_> {
    fn generate(&mut self, _study: &StudyRecord, images: &[ImageGrid], prompt: Option<(&str, &str)>) -> Result<SplitReport, MetricError> {
        let err = MetricError::Generation;
        let state = self.model.state();
        let imgs = prepare_images(images, state.config.image_side, false, 0);
        let enc = encode_images(&imgs, state).map_err(|e| err(e.to_string()))?;
        let p = assemble_prompt(prompt.map(|p| p.0), prompt.map(|p| p.1), self.vocab, self.max_prompt)
            .map_err(|e| err(e.to_string()))?;
        let out = generate_report(&self.model, &enc, &p, self.vocab.specials(), &self.decode).map_err(|e| err(e.to_string()))?;
        Ok(split_sections(&out.ids, self.vocab))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyScore {
    pub patient_id: String,
    pub study_index: usize,
    /// Generated findings and impression, one pair per generated report.
    pub generated: Vec<(String, String)>,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub reward: f64,
    /// Share of this study's reports with no [SEP].
    pub missing_sep: f64,
    pub predicted: Vec<ObservationStates>,
    pub actual: ObservationStates,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreAggregate {
    pub studies: usize,
    pub reports: usize,
    pub bleu4: f64,
    pub corpus_bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub reward: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub missing_sep_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub options: EvalOptions,
    pub averaging: Averaging,
    pub rows: Vec<StudyScore>,
    pub aggregate: ScoreAggregate,
    /// Metrics computed by external tools; merged in when available.
    pub bertscore: Option<f64>,
    pub radgraph: Option<f64>,
    pub chexbert_f1: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

struct Pending<'s> {
    study: &'s StudyRecord,
    reports: Vec<SplitReport>,
}

/// Generates and scores every study of `patients` (or only those with a
/// predecessor). References are the full, untruncated radiologist reports.
pub fn evaluate_split(
    generator: &mut dyn ReportGenerator,
    patients: &[PatientRecord],
    options: EvalOptions,
    encoder: &dyn ReportEncoder,
) -> Result<ScoreReport, MetricError> {
    let longitudinal = options.conditioning == Conditioning::Longitudinal;
    let mut pending = Vec::new();
    for patient in patients {
        let mut prev_generated: Option<(String, String)> = None;
        for (k, study) in patient.studies.iter().enumerate() {
            let scored = options.subset == Subset::All || k > 0;
            let needed = scored || (longitudinal && options.prompt_mode == PromptMode::Generated);
            if !needed {
                continue;
            }
            let prompt: Option<(&str, &str)> = match (longitudinal, options.prompt_mode) {
                (false, _) | (true, PromptMode::Sentinel) => None,
                (true, PromptMode::Radiologist) => {
                    k.checked_sub(1).map(|j| (patient.studies[j].findings.as_str(), patient.studies[j].impression.as_str()))
                }
                (true, PromptMode::Generated) => prev_generated.as_ref().map(|(f, i)| (f.as_str(), i.as_str())),
            };
            let reports = match options.conditioning {
                Conditioning::SingleImage => study
                    .images
                    .iter()
                    .map(|im| generator.generate(study, std::slice::from_ref(im), prompt))
                    .collect::<Result<Vec<_>, _>>()?,
                _ => vec![generator.generate(study, &study.images, prompt)?],
            };
            prev_generated = Some((reports[0].findings.clone(), reports[0].impression.clone()));
            if scored {
                pending.push(Pending { study, reports });
            }
        }
    }

    let references: Vec<String> = pending.iter().map(|p| report_text(&p.study.findings, &p.study.impression)).collect();
    let rows = if pending.is_empty() {
        Vec::new()
    } else {
        let idf = CiderIdf::new(&references.iter().map(|r| vec![r.as_str()]).collect::<Vec<_>>())?;
        let mut rows = Vec::with_capacity(pending.len());
        for (p, reference) in pending.iter().zip(&references) {
            let texts: Vec<String> = p.reports.iter().map(|r| report_text(&r.findings, &r.impression)).collect();
            let rewards = texts.iter().map(|t| cosine_reward(t, reference, encoder).map(|r| r.value)).collect::<Result<Vec<_>, _>>()?;
            let mut actual = [ObservationState::Negative; NUM_CONDITIONS];
            for (a, &on) in actual.iter_mut().zip(&p.study.labels) {
                if on {
                    *a = ObservationState::Positive;
                }
            }
            rows.push(StudyScore {
                patient_id: p.study.patient_id.clone(),
                study_index: p.study.study_index,
                generated: p.reports.iter().map(|r| (r.findings.clone(), r.impression.clone())).collect(),
                bleu4: mean(texts.iter().map(|t| bleu4(t, &[reference]))),
                rouge_l: mean(texts.iter().map(|t| rouge_l(t, reference))),
                cider: mean(texts.iter().map(|t| idf.score(t, &[reference]))),
                reward: mean(rewards),
                missing_sep: mean(p.reports.iter().map(|r| flag_value(r.flags))),
                predicted: p.reports.iter().map(|r| label_extract(&report_text(&r.findings, &r.impression))).collect(),
                actual,
            });
        }
        rows
    };

    let averaging =
        if options.conditioning == Conditioning::SingleImage { Averaging::PerImageThenStudy } else { Averaging::StudyLevelMulti };
    let prf = if rows.is_empty() {
        Prf { f1: 0.0, precision: 0.0, recall: 0.0 }
    } else {
        let predicted: Vec<Vec<ObservationStates>> = rows.iter().map(|r| r.predicted.clone()).collect();
        let actual: Vec<ObservationStates> = rows.iter().map(|r| r.actual).collect();
        macro_prf(&predicted, &actual, averaging)?
    };
    let pairs: Vec<(String, &str)> = pending
        .iter()
        .zip(&references)
        .flat_map(|(p, r)| p.reports.iter().map(move |g| (report_text(&g.findings, &g.impression), r.as_str())))
        .collect();
    let aggregate = ScoreAggregate {
        studies: rows.len(),
        reports: pairs.len(),
        bleu4: mean(rows.iter().map(|r| r.bleu4)),
        corpus_bleu4: corpus_bleu4(&pairs.iter().map(|(c, r)| (c.as_str(), vec![*r])).collect::<Vec<_>>()),
        rouge_l: mean(rows.iter().map(|r| r.rouge_l)),
        cider: mean(rows.iter().map(|r| r.cider)),
        reward: mean(rows.iter().map(|r| r.reward)),
        f1: prf.f1,
        precision: prf.precision,
        recall: prf.recall,
        missing_sep_rate: mean(rows.iter().map(|r| r.missing_sep)),
    };
    Ok(ScoreReport { options, averaging, rows, aggregate, bertscore: None, radgraph: None, chexbert_f1: None })
}

fn flag_value(flags: SectionFlags) -> f64 {
    if flags.missing_sep {
        1.0
    } else {
        0.0
    }
}
