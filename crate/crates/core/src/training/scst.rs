//! Self-critical sequence training: REINFORCE with the greedy report's
//! reward as baseline.

use rand::seq::SliceRandom;

use super::optim::{accumulate, clip_grad_norm, AdamW, StepOutcome};
use super::{
    examples, radiologist_prompt, select_images, validate_state, validation_points, validation_record, Example,
    PromptSource, Stage, StepRecord, TrainConfig, TrainError, TrainOutcome, RunManifest,
};
use crate::corpus::{CorpusSplit, ImageGrid, StudyRecord};
use crate::decoding::{generate_report, DecodeConfig, Generated};
use crate::metrics::{cosine_reward, report_text, ReportEncoder};
use crate::model::{encode_images, loss_and_grads, InferenceModel, LossTargets, ModelState, ParamGroup};
use crate::scheduler::{plan_epoch, CachedPrompt, PromptCache, SchedulerError};
use crate::seeding::{derive_seed, rng_from};
use crate::tokenizer::{assemble_prompt, split_sections, TokenStream, Vocabulary};

/// One training example with its inputs already prepared.
#[derive(Clone, Debug)]
pub struct ScstExample {
    pub images: Vec<ImageGrid>,
    pub prompt: TokenStream,
    /// Whole radiologist report.
    pub reference: String,
}

#[derive(Clone, Debug)]
pub struct ScstStepOutput {
    pub loss: f64,
    pub sample_reward: f64,
    pub baseline_reward: f64,
    /// Greedy reports, produced with the parameters from before the update.
    pub baselines: Vec<Generated>,
    pub samples: Vec<Generated>,
    pub outcome: StepOutcome,
}

/// Per-sequence loss weights `(r_sample − r_baseline) / B`.
pub fn scst_weights(sample: &[f64], baseline: &[f64]) -> Result<Vec<f64>, TrainError> {
    assert_eq!(sample.len(), baseline.len(), "one baseline reward per sample");
    let n = sample.len() as f64;
    sample
        .iter()
        .zip(baseline)
        .enumerate()
        .map(|(i, (s, b))| if s.is_finite() && b.is_finite() { Ok((s - b) / n) } else { Err(TrainError::NonFiniteReward(i)) })
        .collect()
}

fn target_stream(g: &Generated) -> TokenStream {
    TokenStream {
        token_ids: g.ids.clone(),
        section_ids: g.sections.clone(),
        position_ids: (0..g.ids.len() as u32).collect(),
        prompt_len: 0,
    }
}

fn generated_text(g: &Generated, vocab: &Vocabulary) -> String {
    let r = split_sections(&g.ids, vocab);
    report_text(&r.findings, &r.impression)
}

/// Decodes a greedy baseline and a top-k sample per example, scores both
/// against the reference, and applies one update of
/// `Σ_b (r_sample − r_baseline)/B · (−log p(sample))`. Sampled sequences are
/// scored without dropout.
pub fn scst_step(
    batch: &[ScstExample],
    state: &mut ModelState,
    opt: &mut AdamW,
    vocab: &Vocabulary,
    encoder: &dyn ReportEncoder,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<ScstStepOutput, TrainError> {
    let (mut baselines, mut samples) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
    let (mut r_base, mut r_sample) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
    {
        let model = InferenceModel::new(state);
        let greedy = DecodeConfig { max_new_tokens: cfg.max_new_tokens, ..DecodeConfig::greedy() };
        for (i, ex) in batch.iter().enumerate() {
            let enc = encode_images(&ex.images, state)?;
            let sample_cfg = DecodeConfig { max_new_tokens: cfg.max_new_tokens, ..DecodeConfig::top_k(cfg.top_k, derive_seed(step_seed, &[i as u64])) };
            let g = generate_report(&model, &enc, &ex.prompt, vocab.specials(), &greedy)?;
            let s = generate_report(&model, &enc, &ex.prompt, vocab.specials(), &sample_cfg)?;
            let reward = |x: &Generated| {
                cosine_reward(&generated_text(x, vocab), &ex.reference, encoder).map(|r| r.value).map_err(|e| match e {
                    crate::metrics::MetricError::NonFiniteReward => TrainError::NonFiniteReward(i),
                    other => other.into(),
                })
            };
            r_base.push(reward(&g)?);
            r_sample.push(reward(&s)?);
            baselines.push(g);
            samples.push(s);
        }
    }
    let weights = scst_weights(&r_sample, &r_base)?;
    let mut grads = vec![None; state.params().len()];
    let mut loss = 0.0;
    for ((ex, s), &w) in batch.iter().zip(&samples).zip(&weights) {
        if w == 0.0 {
            continue;
        }
        let stream = TokenStream::join(&ex.prompt, &target_stream(s));
        let (l, g) = loss_and_grads(state, &ex.images, &stream, LossTargets::SequenceWeight(w), None)?;
        loss += l;
        accumulate(&mut grads, g);
    }
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    let mask = state.trainable_mask();
    let outcome = opt.update(state.params_mut(), &grads, &mask, cfg.lr);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(ScstStepOutput {
        loss,
        sample_reward: mean(&r_sample),
        baseline_reward: mean(&r_base),
        baselines,
        samples,
        outcome,
    })
}

fn prepare(
    study: &StudyRecord,
    prompt: TokenStream,
    cfg: &TrainConfig,
    side: usize,
    seed: u64,
) -> ScstExample {
    ScstExample {
        images: select_images(study, cfg, side, seed),
        prompt,
        reference: report_text(&study.findings, &study.impression),
    }
}

/// Fine-tunes a teacher-forced state with the encoder frozen. With
/// generated prompts, each epoch follows a batch plan in which every study
/// sits one batch after its predecessor; the predecessor's greedy report
/// travels through a prompt cache.
pub fn train_scst(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    mut state: ModelState,
    encoder: &dyn ReportEncoder,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if cfg.stage != Stage::Scst {
        return Err(TrainError::InvalidConfig("train_scst needs stage scst".into()));
    }
    cfg.check_model(&state, vocab)?;
    let mut pool = examples(&corpus.train);
    if pool.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut frozen = state.frozen().clone();
    frozen.insert(ParamGroup::Encoder);
    state.set_frozen(frozen);

    let side = state.config.image_side;
    let mut manifest = RunManifest::new(cfg, &state.config, corpus, vocab);
    let mut opt = AdamW::new(cfg.optimizer, state.params());
    let mut plans = Vec::new();
    let mut best = state.clone();
    let initial = validate_state(&state, vocab, &corpus.validation, cfg, encoder)?;
    manifest.push_validation(validation_record("scst-initial".into(), 0, 0.0, &initial));

    let generated = cfg.prompt_source == PromptSource::GeneratedPrev;
    let counts: Vec<(String, usize)> = corpus.train.iter().map(|p| (p.patient_id.clone(), p.studies.len())).collect();
    let by_id: std::collections::HashMap<&str, &[StudyRecord]> =
        corpus.train.iter().map(|p| (p.patient_id.as_str(), p.studies.as_slice())).collect();
    let mut cache = PromptCache::new(cfg.batch_size);
    let mut peak = 0;

    for epoch in 0..cfg.epochs {
        let order: Vec<Vec<Example<'_>>> = if generated {
            let plan = plan_epoch(&counts, cfg.batch_size, derive_seed(cfg.seed, &[4, epoch as u64]));
            plan.validate(&counts)?;
            plans.push(plan.dump());
            plan.batches
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|k| {
                            let studies = by_id[k.patient_id.as_str()];
                            Example { study: &studies[k.study_index - 1], prev: (k.study_index > 1).then(|| &studies[k.study_index - 2]) }
                        })
                        .collect()
                })
                .collect()
        } else {
            pool.sort_by(|a, b| (&a.study.patient_id, a.study.study_index).cmp(&(&b.study.patient_id, b.study.study_index)));
            pool.shuffle(&mut rng_from(derive_seed(cfg.seed, &[5, epoch as u64])));
            pool.chunks(cfg.batch_size).map(<[_]>::to_vec).collect()
        };
        let checkpoints = validation_points(order.len(), cfg.validations_per_epoch);

        for (b, batch) in order.iter().enumerate() {
            let mut prepared = Vec::with_capacity(batch.len());
            for (i, ex) in batch.iter().enumerate() {
                let prompt = if generated {
                    match cache.take(&ex.study.patient_id, ex.study.study_index)? {
                        CachedPrompt::NoPrevious => assemble_prompt(None, None, vocab, cfg.max_prompt)?,
                        CachedPrompt::Generated(ids) => {
                            let r = split_sections(&ids, vocab);
                            assemble_prompt(Some(&r.findings), Some(&r.impression), vocab, cfg.max_prompt)?
                        }
                    }
                } else {
                    radiologist_prompt(*ex, cfg, vocab)?
                };
                let seed = derive_seed(cfg.seed, &[6, epoch as u64, b as u64, i as u64]);
                prepared.push(prepare(ex.study, prompt, cfg, side, seed));
            }
            let step_seed = derive_seed(cfg.seed, &[7, epoch as u64, b as u64]);
            let out = scst_step(&prepared, &mut state, &mut opt, vocab, encoder, cfg, step_seed)?;
            if generated {
                for (ex, g) in batch.iter().zip(out.baselines) {
                    if ex.study.study_index < by_id[ex.study.patient_id.as_str()].len() {
                        cache.put(&ex.study.patient_id, ex.study.study_index, g.ids)?;
                    }
                }
                peak = peak.max(cache.peak());
            }
            manifest.push_step(StepRecord {
                step: opt.steps() + opt.skipped(),
                epoch,
                loss: out.loss,
                sample_reward: Some(out.sample_reward),
                baseline_reward: Some(out.baseline_reward),
                applied: out.outcome == StepOutcome::Applied,
            });
            if checkpoints.contains(&b) {
                let agg = validate_state(&state, vocab, &corpus.validation, cfg, encoder)?;
                let id = format!("scst-e{epoch}-b{b}");
                log::info!("{id}: reward {:.4}, validation F1 {:.4}", out.sample_reward, agg.f1);
                let progress = epoch as f64 + (b + 1) as f64 / order.len() as f64;
                if manifest.push_validation(validation_record(id, opt.steps(), progress, &agg)) {
                    best = state.clone();
                }
            }
        }
        if generated && !cache.is_empty() {
            return Err(SchedulerError::Violation(format!("{} cached prompts left at the end of epoch {epoch}", cache.len())).into());
        }
        cache.clear();
    }
    if generated {
        manifest.cache_peak = Some(peak);
    }
    Ok(TrainOutcome { best, last: state, manifest, plans })
}
