//! End-to-end helpers shared by the command line and the examples: tokenizer
//! and model set-up, the two training stages, evaluation, and the comparison
//! of conditioning modes over several seeds.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{CorpusSplit, PatientRecord};
use crate::decoding::DecodeConfig;
use crate::metrics::{
    evaluate_split, Conditioning, EvalOptions, HttpEncoder, MetricError, ModelGenerator, PromptMode, ReportEncoder,
    ScoreAggregate, ScoreReport, Subset, TfCosineEncoder,
};
use crate::model::{init_model, ModelConfig, ModelError, ModelState, ParamGroup};
use crate::tokenizer::{train_bpe, TokenizerError, Vocabulary};
use crate::training::{train_scst, train_teacher_forcing, PromptSource, RewardKind, TrainError, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Contract(String),
}

/// Trains the byte-level BPE on the training split's reports.
pub fn train_vocabulary(corpus: &CorpusSplit, budget: usize) -> Result<Vocabulary, TokenizerError> {
    let texts: Vec<&str> =
        corpus.train.iter().flat_map(|p| &p.studies).flat_map(|s| [s.findings.as_str(), s.impression.as_str()]).collect();
    train_bpe(&texts, budget)
}

/// The configured model, sized to `vocab` and seeded with `seed`.
pub fn model_config(base: &ModelConfig, vocab: &Vocabulary, seed: u64) -> ModelConfig {
    ModelConfig { vocab_size: vocab.size(), seed, ..base.clone() }
}

/// The reward encoder: the remote service when an endpoint is configured,
/// the local n-gram encoder otherwise.
pub fn reward_encoder(run: &RunConfig) -> Box<dyn ReportEncoder> {
    match &run.evaluate.reward_endpoint {
        Some(url) => Box::new(HttpEncoder::new(url, Duration::from_secs(run.evaluate.reward_timeout_secs))),
        None => Box::new(TfCosineEncoder::default()),
    }
}

/// Teacher forcing for one conditioning mode.
///
/// Without `init` every parameter except the LoRA factors is trained from
/// scratch. A longitudinal run started from a trained image-only model
/// (`init`) keeps that model's encoder frozen and fine-tunes the decoder and
/// LoRA factors, so the visual features it inherits stay intact.
pub fn teacher_forcing(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    run: &RunConfig,
    conditioning: Conditioning,
    init: Option<ModelState>,
) -> Result<TrainOutcome, PipelineError> {
    let (state, cfg) = match init {
        None => {
            let mut state = init_model(&model_config(&run.model, vocab, run.seed))?;
            state.set_frozen([ParamGroup::Lora]);
            (state, run.teacher_forcing(conditioning))
        }
        Some(mut state) if conditioning == Conditioning::Longitudinal => {
            state.set_frozen([ParamGroup::Encoder]);
            (state, run.adaptation())
        }
        Some(mut state) => {
            state.set_frozen([ParamGroup::Lora]);
            (state, run.teacher_forcing(conditioning))
        }
    };
    Ok(train_teacher_forcing(corpus, vocab, state, &cfg)?)
}

/// SCST fine-tuning of a teacher-forced state.
pub fn scst(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    run: &RunConfig,
    state: ModelState,
    conditioning: Conditioning,
    prompt_source: PromptSource,
) -> Result<TrainOutcome, PipelineError> {
    let reward = if run.evaluate.reward_endpoint.is_some() { RewardKind::Endpoint } else { RewardKind::TfCosine };
    let encoder = reward_encoder(run);
    let cfg = run.scst(conditioning, prompt_source, reward);
    Ok(train_scst(corpus, vocab, state, encoder.as_ref(), &cfg)?)
}

/// Generates and scores every study of `patients` with the configured decoder.
pub fn evaluate(
    state: &ModelState,
    vocab: &Vocabulary,
    patients: &[PatientRecord],
    options: EvalOptions,
    decode: &DecodeConfig,
    encoder: &dyn ReportEncoder,
) -> Result<ScoreReport, MetricError> {
    let max_prompt = state.config.max_positions.saturating_sub(decode.max_new_tokens).min(crate::tokenizer::DEFAULT_MAX_PROMPT);
    let mut generator = ModelGenerator::new(state, vocab, decode.clone(), max_prompt);
    evaluate_split(&mut generator, patients, options, encoder)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub f1: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub bleu4: MeanStd,
    pub rouge_l: MeanStd,
    pub cider: MeanStd,
    pub reward: MeanStd,
    pub missing_sep_rate: MeanStd,
}

impl MetricSummary {
    pub fn of(runs: &[ScoreAggregate]) -> Self {
        let col = |f: fn(&ScoreAggregate) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            f1: col(|a| a.f1),
            precision: col(|a| a.precision),
            recall: col(|a| a.recall),
            bleu4: col(|a| a.bleu4),
            rouge_l: col(|a| a.rouge_l),
            cider: col(|a| a.cider),
            reward: col(|a| a.reward),
            missing_sep_rate: col(|a| a.missing_sep_rate),
        }
    }

    const NAMES: [&'static str; 8] = ["f1", "precision", "recall", "bleu4", "rouge_l", "cider", "reward", "missing_sep_rate"];

    fn csv_header() -> String {
        Self::NAMES.iter().map(|n| format!("{n}_mean,{n}_std")).collect::<Vec<_>>().join(",")
    }

    fn csv_cells(&self) -> String {
        [self.f1, self.precision, self.recall, self.bleu4, self.rouge_l, self.cider, self.reward, self.missing_sep_rate]
            .iter()
            .map(|m| format!("{},{}", m.mean, m.std))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub conditioning: Conditioning,
    pub runs: Vec<ScoreAggregate>,
    pub summary: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt: PromptMode,
    pub runs: Vec<ScoreAggregate>,
    pub summary: MetricSummary,
}

/// Test-split results of the three conditioning modes, plus the
/// longitudinal model under each prompt source on studies that have a
/// predecessor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub modes: Vec<ModeRow>,
    pub prompts: Vec<PromptRow>,
}

impl Comparison {
    pub fn mode(&self, c: Conditioning) -> Option<&ModeRow> {
        self.modes.iter().find(|r| r.conditioning == c)
    }

    pub fn prompt(&self, p: PromptMode) -> Option<&PromptRow> {
        self.prompts.iter().find(|r| r.prompt == p)
    }

    pub fn modes_csv(&self) -> String {
        let mut out = format!("conditioning,{}\n", MetricSummary::csv_header());
        for r in &self.modes {
            out += &format!("{},{}\n", conditioning_name(r.conditioning), r.summary.csv_cells());
        }
        out
    }

    pub fn prompts_csv(&self) -> String {
        let mut out = format!("prompt,{}\n", MetricSummary::csv_header());
        for r in &self.prompts {
            out += &format!("{},{}\n", prompt_name(r.prompt), r.summary.csv_cells());
        }
        out
    }
}

pub fn conditioning_name(c: Conditioning) -> &'static str {
    match c {
        Conditioning::SingleImage => "single",
        Conditioning::MultiImage => "multi",
        Conditioning::Longitudinal => "longitudinal",
    }
}

pub fn prompt_name(p: PromptMode) -> &'static str {
    match p {
        PromptMode::Sentinel => "sentinel",
        PromptMode::Radiologist => "radiologist",
        PromptMode::Generated => "generated",
    }
}

/// One trained model of a comparison.
pub struct TrainedModel {
    pub conditioning: Conditioning,
    pub seed: u64,
    pub outcome: TrainOutcome,
}

/// Trains single-, multi-image and longitudinal models for every seed and
/// scores them on the test split. The longitudinal model of a seed adapts
/// that seed's multi-image model. `on_model` sees each model as it finishes.
pub fn compare(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    run: &RunConfig,
    seeds: &[u64],
    mut on_model: impl FnMut(&TrainedModel) -> Result<(), PipelineError>,
) -> Result<Comparison, PipelineError> {
    if seeds.is_empty() {
        return Err(PipelineError::Contract("compare needs at least one seed".into()));
    }
    let encoder = reward_encoder(run);
    let modes = [Conditioning::SingleImage, Conditioning::MultiImage, Conditioning::Longitudinal];
    let prompts = [PromptMode::Sentinel, PromptMode::Radiologist, PromptMode::Generated];
    let mut by_mode: Vec<Vec<ScoreAggregate>> = vec![Vec::new(); modes.len()];
    let mut by_prompt: Vec<Vec<ScoreAggregate>> = vec![Vec::new(); prompts.len()];
    for &seed in seeds {
        let run = RunConfig { seed, ..run.clone() };
        let mut multi: Option<ModelState> = None;
        for (m, &c) in modes.iter().enumerate() {
            let init = if c == Conditioning::Longitudinal { multi.take() } else { None };
            let outcome = teacher_forcing(corpus, vocab, &run, c, init)?;
            let report = evaluate(&outcome.best, vocab, &corpus.test, EvalOptions::new(c), &run.decode, encoder.as_ref())?;
            log::info!("seed {seed} {}: test F1 {:.4}", conditioning_name(c), report.aggregate.f1);
            by_mode[m].push(report.aggregate);
            if c == Conditioning::MultiImage {
                multi = Some(outcome.best.clone());
            }
            if c == Conditioning::Longitudinal {
                for (p, &prompt) in prompts.iter().enumerate() {
                    let o = EvalOptions { conditioning: c, prompt_mode: prompt, subset: Subset::HasPrevious };
                    let r = evaluate(&outcome.best, vocab, &corpus.test, o, &run.decode, encoder.as_ref())?;
                    by_prompt[p].push(r.aggregate);
                }
            }
            on_model(&TrainedModel { conditioning: c, seed, outcome })?;
        }
    }
    Ok(Comparison {
        seeds: seeds.to_vec(),
        modes: modes
            .iter()
            .zip(by_mode)
            .map(|(&conditioning, runs)| ModeRow { conditioning, summary: MetricSummary::of(&runs), runs })
            .collect(),
        prompts: prompts
            .iter()
            .zip(by_prompt)
            .map(|(&prompt, runs)| PromptRow { prompt, summary: MetricSummary::of(&runs), runs })
            .collect(),
    })
}
