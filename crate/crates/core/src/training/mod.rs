//! Two-stage optimisation: teacher forcing, then self-critical sequence
//! training against a report-similarity reward.

mod optim;
mod scst;
mod teacher;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, ImageGrid, PatientRecord, StudyRecord};
use crate::decoding::{DecodeConfig, DecodeError};
use crate::metrics::{
    evaluate_split, Conditioning, EvalOptions, MetricError, ModelGenerator, PromptMode, ReportEncoder, ScoreAggregate,
};
use crate::model::{prepare_images, ModelConfig, ModelError, ModelState};
use crate::scheduler::{PlanDump, SchedulerError};
use crate::tokenizer::{assemble_prompt, TokenStream, TokenizerError, Vocabulary};

pub use optim::{accumulate, clip_grad_norm, grad_norm, AdamW, AdamWConfig, StepOutcome};
pub use scst::{scst_step, scst_weights, train_scst, ScstExample, ScstStepOutput};
pub use teacher::train_teacher_forcing;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("reward for example {0} is not finite")]
    NonFiniteReward(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TeacherForcing,
    Scst,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tf" | "teacher_forcing" => Ok(Stage::TeacherForcing),
            "scst" => Ok(Stage::Scst),
            other => Err(format!("unknown stage `{other}` (tf, scst)")),
        }
    }
}

/// Origin of the previous-report prompt during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    None,
    RadiologistPrev,
    /// The model's own greedy report for the previous study, produced one
    /// batch earlier.
    GeneratedPrev,
}

impl std::str::FromStr for PromptSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(PromptSource::None),
            "radiologist" | "radiologist_prev" => Ok(PromptSource::RadiologistPrev),
            "generated" | "generated_prev" => Ok(PromptSource::GeneratedPrev),
            other => Err(format!("unknown prompt source `{other}` (none, radiologist, generated)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Bag-of-n-grams cosine, computed locally.
    TfCosine,
    /// Embeddings from an external service.
    Endpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub validations_per_epoch: usize,
    pub conditioning: Conditioning,
    pub prompt_source: PromptSource,
    pub reward: Option<RewardKind>,
    pub seed: u64,
    /// Global gradient-norm bound; off when `None`.
    pub grad_clip: Option<f64>,
    /// Random rotation and crop of training images.
    pub augment: bool,
    pub top_k: usize,
    pub max_prompt: usize,
    pub max_target: usize,
    pub max_new_tokens: usize,
    /// Only the first this-many validation patients are scored.
    pub validation_patients: Option<usize>,
}

impl TrainConfig {
    pub fn teacher_forcing(conditioning: Conditioning) -> Self {
        Self {
            stage: Stage::TeacherForcing,
            lr: 1e-3,
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            epochs: 8,
            validations_per_epoch: 1,
            conditioning,
            prompt_source: default_prompt_source(conditioning),
            reward: None,
            seed: 0,
            grad_clip: None,
            augment: true,
            top_k: 50,
            max_prompt: crate::tokenizer::DEFAULT_MAX_PROMPT,
            max_target: crate::tokenizer::DEFAULT_MAX_TARGET,
            max_new_tokens: 160,
            validation_patients: None,
        }
    }

    pub fn scst(conditioning: Conditioning, prompt_source: PromptSource) -> Self {
        Self {
            stage: Stage::Scst,
            lr: 1e-5,
            epochs: 1,
            validations_per_epoch: 10,
            prompt_source,
            reward: Some(RewardKind::TfCosine),
            ..Self::teacher_forcing(conditioning)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("optimizer needs betas in [0, 1), eps > 0 and weight_decay >= 0");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.validations_per_epoch == 0 {
            return bad("batch_size, epochs and validations_per_epoch must be positive");
        }
        if self.stage == Stage::Scst && self.reward.is_none() {
            return bad("scst needs a reward");
        }
        let longitudinal = self.conditioning == Conditioning::Longitudinal;
        if longitudinal && self.prompt_source == PromptSource::None {
            return bad("longitudinal conditioning needs a prompt source");
        }
        if !longitudinal && self.prompt_source != PromptSource::None {
            return bad("only longitudinal conditioning takes a prompt source");
        }
        if self.stage == Stage::TeacherForcing && self.prompt_source == PromptSource::GeneratedPrev {
            return bad("teacher forcing prompts with the radiologist report; generated prompts need scst");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.top_k == 0 || self.max_new_tokens < 2 {
            return bad("top_k must be positive and max_new_tokens at least 2");
        }
        Ok(())
    }

    fn check_model(&self, state: &ModelState, vocab: &Vocabulary) -> Result<(), TrainError> {
        self.validate()?;
        if state.config.vocab_size != vocab.size() {
            return Err(TrainError::InvalidConfig(format!(
                "model vocabulary {} differs from tokenizer vocabulary {}",
                state.config.vocab_size,
                vocab.size()
            )));
        }
        if self.max_prompt + self.max_target > state.config.max_positions {
            return Err(TrainError::InvalidConfig(format!(
                "max_prompt + max_target = {} exceeds the model's {} positions",
                self.max_prompt + self.max_target,
                state.config.max_positions
            )));
        }
        Ok(())
    }

    fn eval_options(&self) -> EvalOptions {
        let mut o = EvalOptions::new(self.conditioning);
        if self.prompt_source == PromptSource::GeneratedPrev {
            o.prompt_mode = PromptMode::Generated;
        }
        o
    }
}

fn default_prompt_source(c: Conditioning) -> PromptSource {
    if c == Conditioning::Longitudinal {
        PromptSource::RadiologistPrev
    } else {
        PromptSource::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub sample_reward: Option<f64>,
    pub baseline_reward: Option<f64>,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub checkpoint: String,
    pub step: u64,
    /// Epochs completed, fractional.
    pub progress: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub reward: f64,
    pub bleu4: f64,
    pub missing_sep_rate: f64,
}

/// Record of one training run. Series only grow while the run is active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub corpus_hash: String,
    pub vocab_hash: String,
    steps: Vec<StepRecord>,
    validations: Vec<ValidationRecord>,
    selected_checkpoint: Option<String>,
    /// Largest prompt-cache occupancy, for generated-prompt runs.
    pub cache_peak: Option<usize>,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, model: &ModelConfig, corpus: &CorpusSplit, vocab: &Vocabulary) -> Self {
        Self {
            config: config.clone(),
            model: model.clone(),
            corpus_hash: corpus.digest(),
            vocab_hash: vocab.digest(),
            steps: Vec::new(),
            validations: Vec::new(),
            selected_checkpoint: None,
            cache_peak: None,
        }
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn validations(&self) -> &[ValidationRecord] {
        &self.validations
    }

    pub fn selected_checkpoint(&self) -> Option<&str> {
        self.selected_checkpoint.as_deref()
    }

    pub fn push_step(&mut self, r: StepRecord) {
        self.steps.push(r);
    }

    /// Appends a validation; returns whether it beats every earlier one on
    /// F1, with the reward breaking exact ties.
    pub fn push_validation(&mut self, r: ValidationRecord) -> bool {
        let best = self.validations.iter().all(|v| r.f1 > v.f1 || (r.f1 == v.f1 && r.reward > v.reward));
        if best {
            self.selected_checkpoint = Some(r.checkpoint.clone());
        }
        self.validations.push(r);
        best
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub struct TrainOutcome {
    /// State with the highest validation F1.
    pub best: ModelState,
    /// State after the final update.
    pub last: ModelState,
    pub manifest: RunManifest,
    /// Batch plans of generated-prompt epochs.
    pub plans: Vec<PlanDump>,
}

/// One (study, previous study) pair from the training split.
#[derive(Clone, Copy)]
struct Example<'c> {
    study: &'c StudyRecord,
    prev: Option<&'c StudyRecord>,
}

fn examples(patients: &[PatientRecord]) -> Vec<Example<'_>> {
    patients
        .iter()
        .flat_map(|p| p.studies.iter().enumerate().map(|(k, s)| Example { study: s, prev: k.checked_sub(1).map(|j| &p.studies[j]) }))
        .collect()
}

/// Model inputs for one study: every image, or one drawn at random in
/// single-image mode; augmented when `augment` is set.
fn select_images(study: &StudyRecord, cfg: &TrainConfig, side: usize, seed: u64) -> Vec<ImageGrid> {
    use rand::Rng;
    let chosen: Vec<ImageGrid> = if cfg.conditioning == Conditioning::SingleImage {
        let i = crate::seeding::rng_from(seed).gen_range(0..study.images.len());
        vec![study.images[i].clone()]
    } else {
        study.images.clone()
    };
    prepare_images(&chosen, side, cfg.augment, seed)
}

/// Prompt from the previous radiologist report, or the placeholders.
fn radiologist_prompt(ex: Example<'_>, cfg: &TrainConfig, vocab: &Vocabulary) -> Result<TokenStream, TokenizerError> {
    let prev = match cfg.prompt_source {
        PromptSource::None => None,
        _ => ex.prev,
    };
    assemble_prompt(prev.map(|p| p.findings.as_str()), prev.map(|p| p.impression.as_str()), vocab, cfg.max_prompt)
}

/// Greedy decoding over the validation split.
pub fn validate_state(
    state: &ModelState,
    vocab: &Vocabulary,
    patients: &[PatientRecord],
    cfg: &TrainConfig,
    encoder: &dyn ReportEncoder,
) -> Result<ScoreAggregate, TrainError> {
    let limit = cfg.validation_patients.unwrap_or(patients.len()).min(patients.len());
    let decode = DecodeConfig { max_new_tokens: cfg.max_new_tokens, ..DecodeConfig::greedy() };
    let mut generator = ModelGenerator::new(state, vocab, decode, cfg.max_prompt);
    let report = evaluate_split(&mut generator, &patients[..limit], cfg.eval_options(), encoder)?;
    Ok(report.aggregate)
}

fn validation_record(checkpoint: String, step: u64, progress: f64, a: &ScoreAggregate) -> ValidationRecord {
    ValidationRecord {
        checkpoint,
        step,
        progress,
        f1: a.f1,
        precision: a.precision,
        recall: a.recall,
        reward: a.reward,
        bleu4: a.bleu4,
        missing_sep_rate: a.missing_sep_rate,
    }
}

/// Batch indices after which a validation runs: `per_epoch` points spread
/// evenly, the last one at the end of the epoch.
fn validation_points(batches: usize, per_epoch: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=per_epoch).map(|v| (v * batches).div_ceil(per_epoch).max(1) - 1).collect();
    out.dedup();
    out
}
