//! Teacher forcing: mean token cross-entropy on ground-truth prefixes.

use rand::seq::SliceRandom;

use super::optim::{accumulate, clip_grad_norm, AdamW, StepOutcome};
use super::{
    examples, radiologist_prompt, select_images, validate_state, validation_points, validation_record, Stage, StepRecord,
    TrainConfig, TrainError, TrainOutcome, RunManifest,
};
use crate::corpus::CorpusSplit;
use crate::metrics::TfCosineEncoder;
use crate::model::{loss_and_grads, LossTargets, ModelState};
use crate::seeding::{derive_seed, rng_from};
use crate::tokenizer::{assemble_target, StreamMode, TokenStream, Vocabulary};

/// Trains on the training split and returns the state with the best
/// validation macro F1 (greedy decoding) together with the final state.
pub fn train_teacher_forcing(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    mut state: ModelState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if cfg.stage != Stage::TeacherForcing {
        return Err(TrainError::InvalidConfig("train_teacher_forcing needs stage teacher_forcing".into()));
    }
    cfg.check_model(&state, vocab)?;
    let mut pool = examples(&corpus.train);
    if pool.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let side = state.config.image_side;
    let dropout = state.config.dropout > 0.0 || state.config.lora.dropout > 0.0;
    let encoder = TfCosineEncoder::default();
    let mut manifest = RunManifest::new(cfg, &state.config, corpus, vocab);
    let mut opt = AdamW::new(cfg.optimizer, state.params());
    let mut best: Option<ModelState> = None;
    let batches = pool.len().div_ceil(cfg.batch_size);
    let checkpoints = validation_points(batches, cfg.validations_per_epoch);

    for epoch in 0..cfg.epochs {
        pool.sort_by(|a, b| (&a.study.patient_id, a.study.study_index).cmp(&(&b.study.patient_id, b.study.study_index)));
        pool.shuffle(&mut rng_from(derive_seed(cfg.seed, &[1, epoch as u64])));
        for (b, batch) in pool.chunks(cfg.batch_size).enumerate() {
            let mut grads = vec![None; state.params().len()];
            let mut loss = 0.0;
            for (i, ex) in batch.iter().enumerate() {
                let seed = derive_seed(cfg.seed, &[2, epoch as u64, b as u64, i as u64]);
                let images = select_images(ex.study, cfg, side, seed);
                let prompt = radiologist_prompt(*ex, cfg, vocab)?;
                let target = assemble_target(&ex.study.findings, &ex.study.impression, vocab, cfg.max_target, StreamMode::Training)?;
                let stream = TokenStream::join(&prompt, &target);
                let mut rng = rng_from(derive_seed(seed, &[3]));
                let (l, g) = loss_and_grads(&state, &images, &stream, LossTargets::TeacherForcing, dropout.then_some(&mut rng))?;
                loss += l;
                accumulate(&mut grads, g);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.scale_in_place(scale);
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let mask = state.trainable_mask();
            let outcome = opt.update(state.params_mut(), &grads, &mask, cfg.lr);
            manifest.push_step(StepRecord {
                step: opt.steps() + opt.skipped(),
                epoch,
                loss: loss * scale,
                sample_reward: None,
                baseline_reward: None,
                applied: outcome == StepOutcome::Applied,
            });
            if checkpoints.contains(&b) {
                let agg = validate_state(&state, vocab, &corpus.validation, cfg, &encoder)?;
                let progress = epoch as f64 + (b + 1) as f64 / batches as f64;
                let id = format!("tf-e{epoch}-b{b}");
                log::info!("{id}: loss {:.4}, validation F1 {:.4}", loss * scale, agg.f1);
                if manifest.push_validation(validation_record(id, opt.steps(), progress, &agg)) {
                    best = Some(state.clone());
                }
            }
        }
    }
    Ok(TrainOutcome { best: best.unwrap_or_else(|| state.clone()), last: state, manifest, plans: Vec::new() })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorConfig, SplitSizes};
    use crate::metrics::Conditioning;
    use crate::model::{init_model, teacher_forcing_loss, encode_images, ModelConfig, ParamGroup};
    use crate::tokenizer::{assemble_prompt, train_bpe};

    pub(crate) fn tiny_setup(train: usize) -> (CorpusSplit, Vocabulary, ModelState) {
        let cfg = GeneratorConfig {
            patients: SplitSizes { train, validation: 2, test: 2 },
            image_side: 24,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let texts: Vec<&str> =
            corpus.train.iter().flat_map(|p| &p.studies).flat_map(|s| [s.findings.as_str(), s.impression.as_str()]).collect();
        let vocab = train_bpe(&texts, 272).unwrap();
        let mc = ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ff_width: 24,
            vocab_size: vocab.size(),
            max_positions: 192,
            image_side: 16,
            patch_size: 8,
            encoder_width: 12,
            ..Default::default()
        };
        (corpus, vocab, init_model(&mc).unwrap())
    }

    pub(crate) fn tiny_tf(conditioning: Conditioning) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            max_prompt: 96,
            max_target: 96,
            max_new_tokens: 24,
            ..TrainConfig::teacher_forcing(conditioning)
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (corpus, vocab, state) = tiny_setup(3);
        let cfg = TrainConfig { lr: 0.0, ..tiny_tf(Conditioning::MultiImage) };
        let out = train_teacher_forcing(&corpus, &vocab, state.clone(), &cfg).unwrap();
        assert_eq!(out.last.params(), state.params());
        assert!(out.manifest.steps().iter().all(|s| s.applied && s.loss.is_finite()));
    }

    #[test]
    fn repeated_steps_on_one_example_lower_its_loss() {
        let (mut corpus, vocab, state) = tiny_setup(1);
        corpus.train[0].studies.truncate(1);
        let study = corpus.train[0].studies[0].clone();
        let cfg = TrainConfig { epochs: 200, validations_per_epoch: 1, augment: false, ..tiny_tf(Conditioning::MultiImage) };
        let loss_of = |s: &ModelState| {
            let imgs = crate::model::prepare_images(&study.images, 16, false, 0);
            let enc = encode_images(&imgs, s).unwrap();
            let p = assemble_prompt(None, None, &vocab, 96).unwrap();
            let t = assemble_target(&study.findings, &study.impression, &vocab, 96, StreamMode::Training).unwrap();
            teacher_forcing_loss(&TokenStream::join(&p, &t), &enc, s).unwrap()
        };
        let before = loss_of(&state);
        corpus.validation.truncate(1);
        corpus.validation[0].studies.truncate(1);
        let out = train_teacher_forcing(&corpus, &vocab, state, &cfg).unwrap();
        let after = loss_of(&out.last);
        assert!(after < before, "{after} >= {before}");
        assert!(after < 0.5 * before);
        assert_eq!(out.manifest.steps().len(), 200);
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let (corpus, vocab, state) = tiny_setup(3);
        let cfg = tiny_tf(Conditioning::Longitudinal);
        let a = train_teacher_forcing(&corpus, &vocab, state.clone(), &cfg).unwrap();
        let b = train_teacher_forcing(&corpus, &vocab, state.clone(), &cfg).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.best, b.best);
        assert_eq!(a.last, b.last);
        let c = train_teacher_forcing(&corpus, &vocab, state, &TrainConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.manifest.steps(), c.manifest.steps());
    }

    #[test]
    fn single_image_mode_and_frozen_groups() {
        let (corpus, vocab, mut state) = tiny_setup(3);
        state.set_frozen([ParamGroup::Encoder]);
        let digest = state.group_digest(ParamGroup::Encoder);
        let out = train_teacher_forcing(&corpus, &vocab, state, &tiny_tf(Conditioning::SingleImage)).unwrap();
        assert_eq!(out.last.group_digest(ParamGroup::Encoder), digest);
        assert_eq!(out.manifest.validations().len(), 1);
        assert_eq!(out.manifest.selected_checkpoint(), Some(out.manifest.validations()[0].checkpoint.as_str()));
    }

    #[test]
    fn wrong_stage_or_vocab_is_rejected() {
        let (corpus, vocab, state) = tiny_setup(2);
        let cfg = TrainConfig { stage: Stage::Scst, reward: Some(super::super::RewardKind::TfCosine), ..tiny_tf(Conditioning::MultiImage) };
        assert!(matches!(train_teacher_forcing(&corpus, &vocab, state.clone(), &cfg), Err(TrainError::InvalidConfig(_))));
        let other = train_bpe(&["zzz"], 256).unwrap();
        assert!(train_teacher_forcing(&corpus, &other, state, &tiny_tf(Conditioning::MultiImage)).is_err());
    }
}
