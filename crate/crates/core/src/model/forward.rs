//! Differentiable forward pass, built on the autograd tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelError, ModelState, PIXEL_MEAN, PIXEL_STD};
use crate::autograd::{NllTarget, NodeId, ParamGrads, Tape};
use crate::corpus::ImageGrid;
use crate::tensor::Matrix;
use crate::tokenizer::TokenStream;

/// Concatenated per-image patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStudy {
    pub features: Matrix,
    /// Start row of each image's block, plus the total row count.
    pub image_boundaries: Vec<usize>,
}

/// How next-token log-likelihoods over the target enter the scalar loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossTargets {
    /// Mean negative log-likelihood over target positions.
    TeacherForcing,
    /// `weight × Σ −log p` over target positions.
    SequenceWeight(f64),
}

pub(crate) fn check_images(images: &[ImageGrid], state: &ModelState) -> Result<(), ModelError> {
    let cfg = &state.config;
    if images.is_empty() || images.len() > cfg.max_images {
        return Err(ModelError::ImageCount { got: images.len(), max: cfg.max_images });
    }
    if let Some(im) = images.iter().find(|im| im.side() != cfg.image_side) {
        return Err(ModelError::ImageSide { got: im.side(), expected: cfg.image_side });
    }
    Ok(())
}

pub(crate) fn check_stream(stream: &TokenStream, state: &ModelState) -> Result<(), ModelError> {
    let cfg = &state.config;
    let n = stream.token_ids.len();
    if stream.section_ids.len() != n || stream.position_ids.len() != n {
        return Err(ModelError::Shape("token, section and position ids differ in length".into()));
    }
    if n > cfg.max_positions || stream.position_ids.iter().any(|&p| p as usize >= cfg.max_positions) {
        return Err(ModelError::StreamTooLong { got: n, max: cfg.max_positions });
    }
    if let Some(&id) = stream.token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
    }
    if stream.section_ids.iter().any(|&s| s as usize >= cfg.num_sections) {
        return Err(ModelError::Shape("section id out of range".into()));
    }
    Ok(())
}

/// Standardised `(patches × patch²)` matrix of one image, patches in row-major order.
pub(crate) fn patch_matrix(img: &ImageGrid, patch: usize) -> Matrix {
    let per_side = img.side() / patch;
    let mut m = Matrix::zeros(per_side * per_side, patch * patch);
    for pr in 0..per_side {
        for pc in 0..per_side {
            let row = m.row_mut(pr * per_side + pc);
            for y in 0..patch {
                for x in 0..patch {
                    row[y * patch + x] = (img.intensity(pr * patch + y, pc * patch + x) - PIXEL_MEAN) / PIXEL_STD;
                }
            }
        }
    }
    m
}

pub(crate) fn encoder_tape(tape: &mut Tape, state: &ModelState, images: &[ImageGrid]) -> NodeId {
    let lay = &state.layout;
    let blocks: Vec<NodeId> = images
        .iter()
        .map(|im| {
            let x = tape.constant(patch_matrix(im, state.config.patch_size));
            let (w, b) = (tape.param(lay.patch.0), tape.param(lay.patch.1));
            let h = tape.linear(x, w, Some(b));
            let pos = tape.param(lay.patch_pos);
            let h = tape.add(h, pos);
            let (g, be) = (tape.param(lay.enc_ln.0), tape.param(lay.enc_ln.1));
            let h = tape.layer_norm(h, g, be);
            let (w, b) = (tape.param(lay.enc_proj.0), tape.param(lay.enc_proj.1));
            tape.linear(h, w, Some(b))
        })
        .collect();
    tape.concat_rows(&blocks)
}

fn dropout(tape: &mut Tape, x: NodeId, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> NodeId {
    let Some(rng) = rng.as_deref_mut() else { return x };
    if rate <= 0.0 {
        return x;
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 / (1.0 - rate);
    let mask = Matrix::from_fn(r, c, |_, _| if rng.gen_bool(rate) { 0.0 } else { keep });
    tape.mask(x, mask)
}

fn linear_p(tape: &mut Tape, x: NodeId, ids: (usize, usize)) -> NodeId {
    let (w, b) = (tape.param(ids.0), tape.param(ids.1));
    tape.linear(x, w, Some(b))
}

fn layer_norm_p(tape: &mut Tape, x: NodeId, ids: (usize, usize)) -> NodeId {
    let (g, b) = (tape.param(ids.0), tape.param(ids.1));
    tape.layer_norm(x, g, b)
}

/// Logits `(stream length × vocab)`. Passing an RNG enables dropout.
pub(crate) fn decoder_tape(
    tape: &mut Tape,
    state: &ModelState,
    stream: &TokenStream,
    enc: NodeId,
    mut rng: Option<&mut ChaCha8Rng>,
) -> NodeId {
    let cfg = &state.config;
    let lay = &state.layout;
    let ids: Vec<usize> = stream.token_ids.iter().map(|&t| t as usize).collect();
    let pos: Vec<usize> = stream.position_ids.iter().map(|&p| p as usize).collect();
    let tok_t = tape.param(lay.tok);
    let pos_t = tape.param(lay.pos);
    let te = tape.gather(tok_t, &ids);
    let pe = tape.gather(pos_t, &pos);
    let mut x = tape.add(te, pe);
    if cfg.section_embeddings {
        let secs: Vec<usize> = stream.section_ids.iter().map(|&s| s as usize).collect();
        let sec_t = tape.param(lay.sec);
        let se = tape.gather(sec_t, &secs);
        x = tape.add(x, se);
    }
    let scaling = cfg.lora.scaling();
    for layer in &lay.layers {
        let h = layer_norm_p(tape, x, layer.ln1);
        let mut projections = Vec::with_capacity(2);
        for (base, lora) in [(layer.q, layer.lora_q), (layer.k, layer.lora_k)] {
            let mut p = linear_p(tape, h, base);
            if let Some((a, b)) = lora {
                let hin = dropout(tape, h, cfg.lora.dropout, &mut rng);
                let a = { let an = tape.param(a); tape.linear(hin, an, None) };
                let bn = tape.param(b);
                let delta = tape.linear(a, bn, None);
                let delta = tape.scale(delta, scaling);
                p = tape.add(p, delta);
            }
            projections.push(p);
        }
        let v = linear_p(tape, h, layer.v);
        let att = tape.attention(projections[0], projections[1], v, cfg.heads, true);
        let att = linear_p(tape, att, layer.o);
        let att = dropout(tape, att, cfg.dropout, &mut rng);
        x = tape.add(x, att);

        let h = layer_norm_p(tape, x, layer.ln2);
        let q = linear_p(tape, h, layer.cq);
        let k = linear_p(tape, enc, layer.ck);
        let v = linear_p(tape, enc, layer.cv);
        let cross = tape.attention(q, k, v, cfg.heads, false);
        let cross = linear_p(tape, cross, layer.co);
        let cross = dropout(tape, cross, cfg.dropout, &mut rng);
        x = tape.add(x, cross);

        let h = layer_norm_p(tape, x, layer.ln3);
        let f = linear_p(tape, h, layer.ff1);
        let f = tape.gelu(f);
        let f = linear_p(tape, f, layer.ff2);
        let f = dropout(tape, f, cfg.dropout, &mut rng);
        x = tape.add(x, f);
    }
    let x = layer_norm_p(tape, x, lay.final_ln);
    linear_p(tape, x, lay.lm_head)
}

/// Encodes each image independently and concatenates the features in input order.
pub fn encode_images(images: &[ImageGrid], state: &ModelState) -> Result<EncodedStudy, ModelError> {
    check_images(images, state)?;
    let frozen = vec![false; state.params.len()];
    let mut tape = Tape::new(&state.params, &frozen);
    let out = encoder_tape(&mut tape, state, images);
    let per = state.config.patches_per_image();
    Ok(EncodedStudy {
        features: tape.value(out).clone(),
        image_boundaries: (0..=images.len()).map(|i| i * per).collect(),
    })
}

/// Evaluation-mode logits for every stream position.
pub fn decode_forward(stream: &TokenStream, enc: &EncodedStudy, state: &ModelState) -> Result<Matrix, ModelError> {
    check_stream(stream, state)?;
    let frozen = vec![false; state.params.len()];
    let mut tape = Tape::new(&state.params, &frozen);
    let e = tape.constant(enc.features.clone());
    let logits = decoder_tape(&mut tape, state, stream, e, None);
    Ok(tape.value(logits).clone())
}

fn nll_targets(stream: &TokenStream, weight: f64) -> Result<Vec<NllTarget>, ModelError> {
    let n = stream.token_ids.len();
    if stream.prompt_len + 1 >= n {
        return Err(ModelError::EmptyTarget);
    }
    Ok((stream.prompt_len..n - 1)
        .map(|row| NllTarget { row, token: stream.token_ids[row + 1] as usize, weight })
        .collect())
}

fn loss_targets(stream: &TokenStream, targets: LossTargets) -> Result<Vec<NllTarget>, ModelError> {
    let count = stream.token_ids.len().saturating_sub(stream.prompt_len + 1);
    match targets {
        LossTargets::TeacherForcing => nll_targets(stream, 1.0 / count.max(1) as f64),
        LossTargets::SequenceWeight(w) => nll_targets(stream, w),
    }
}

/// Mean next-token negative log-likelihood over target positions; prompt
/// positions are excluded.
pub fn teacher_forcing_loss(stream: &TokenStream, enc: &EncodedStudy, state: &ModelState) -> Result<f64, ModelError> {
    check_stream(stream, state)?;
    let targets = loss_targets(stream, LossTargets::TeacherForcing)?;
    let frozen = vec![false; state.params.len()];
    let mut tape = Tape::new(&state.params, &frozen);
    let e = tape.constant(enc.features.clone());
    let logits = decoder_tape(&mut tape, state, stream, e, None);
    let loss = tape.weighted_nll(logits, targets);
    Ok(tape.value(loss).item())
}

/// `Σ log p(target token | prefix)` over the target part of the stream.
pub fn sequence_log_prob(stream: &TokenStream, enc: &EncodedStudy, state: &ModelState) -> Result<f64, ModelError> {
    check_stream(stream, state)?;
    let targets = loss_targets(stream, LossTargets::SequenceWeight(-1.0))?;
    let frozen = vec![false; state.params.len()];
    let mut tape = Tape::new(&state.params, &frozen);
    let e = tape.constant(enc.features.clone());
    let logits = decoder_tape(&mut tape, state, stream, e, None);
    let lp = tape.weighted_nll(logits, targets);
    Ok(tape.value(lp).item())
}

/// Loss and gradients for all trainable parameters, running the encoder on
/// the tape so its parameters receive gradients unless frozen. An RNG turns
/// on dropout.
pub fn loss_and_grads(
    state: &ModelState,
    images: &[ImageGrid],
    stream: &TokenStream,
    targets: LossTargets,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ParamGrads), ModelError> {
    check_images(images, state)?;
    check_stream(stream, state)?;
    let targets = loss_targets(stream, targets)?;
    let mask = state.trainable_mask();
    let mut tape = Tape::new(&state.params, &mask);
    let enc = encoder_tape(&mut tape, state, images);
    let logits = decoder_tape(&mut tape, state, stream, enc, rng);
    let loss = tape.weighted_nll(logits, targets);
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)))
}
