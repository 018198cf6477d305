use super::*;
use crate::corpus::{ImageGrid, ViewTag};
use crate::tokenizer::TokenStream;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        ff_width: 24,
        vocab_size: 37,
        max_positions: 24,
        image_side: 8,
        patch_size: 4,
        encoder_width: 12,
        seed: 3,
        ..Default::default()
    }
}

pub(crate) fn image(side: usize, seed: usize) -> ImageGrid {
    let px: Vec<f64> = (0..side * side).map(|i| ((i * 31 + seed * 17) % 97) as f64 / 96.0).collect();
    ImageGrid::from_intensities(side, ViewTag::Frontal, &px)
}

pub(crate) fn stream(ids: &[u32], prompt_len: usize) -> TokenStream {
    let n = ids.len();
    TokenStream {
        token_ids: ids.to_vec(),
        section_ids: (0..n).map(|i| if i < prompt_len { (2 * i / prompt_len.max(1)) as u8 } else { 2 + (2 * (i - prompt_len) / (n - prompt_len)) as u8 }).collect(),
        position_ids: (0..n as u32).collect(),
        prompt_len,
    }
}

fn randomize_lora(state: &mut ModelState) {
    for (i, name) in state.names().to_vec().iter().enumerate() {
        if name.ends_with("lora_b") {
            let m = &mut state.params_mut()[i];
            for (j, v) in m.data_mut().iter_mut().enumerate() {
                *v = ((j * 7 % 11) as f64 - 5.0) * 0.01;
            }
        }
    }
}

#[test]
fn logits_have_stream_by_vocab_shape() {
    let state = init_model(&tiny_config()).unwrap();
    let enc = encode_images(&[image(8, 0)], &state).unwrap();
    let s = stream(&[1, 2, 3, 4, 5, 6], 2);
    assert_eq!(decode_forward(&s, &enc, &state).unwrap().shape(), (6, 37));
}

#[test]
fn later_tokens_do_not_change_earlier_logits() {
    let mut state = init_model(&tiny_config()).unwrap();
    randomize_lora(&mut state);
    let enc = encode_images(&[image(8, 1), image(8, 2)], &state).unwrap();
    let a = decode_forward(&stream(&[1, 2, 3, 4, 5, 6, 7], 3), &enc, &state).unwrap();
    for i in 0..6 {
        let mut ids = vec![1, 2, 3, 4, 5, 6, 7];
        for t in ids.iter_mut().skip(i + 1) {
            *t = (*t * 5 + 3) % 37;
        }
        let b = decode_forward(&stream(&ids, 3), &enc, &state).unwrap();
        for r in 0..=i {
            assert_eq!(a.row(r), b.row(r), "row {r} changed after perturbing positions > {i}");
        }
    }
}

#[test]
fn zero_section_embeddings_match_a_model_without_them() {
    let mut with = init_model(&tiny_config()).unwrap();
    let sec = with.layout.sec;
    with.params_mut()[sec] = Matrix::zeros(4, 16);
    let mut without = with.clone();
    without.config.section_embeddings = false;
    let enc = encode_images(&[image(8, 3)], &with).unwrap();
    let s = stream(&[4, 5, 6, 7, 8], 2);
    assert_eq!(decode_forward(&s, &enc, &with).unwrap(), decode_forward(&s, &enc, &without).unwrap());
}

#[test]
fn lora_at_init_is_bit_identical_to_the_base_model() {
    let adapted = init_model(&tiny_config()).unwrap();
    let mut base_cfg = tiny_config();
    base_cfg.lora.targets.clear();
    let mut base = init_model(&base_cfg).unwrap();
    for (i, name) in base.names().to_vec().iter().enumerate() {
        let j = adapted.param_index(name).unwrap();
        base.params_mut()[i] = adapted.params()[j].clone();
    }
    let enc = encode_images(&[image(8, 4)], &adapted).unwrap();
    let s = stream(&[9, 8, 7, 6, 5, 4], 3);
    let a = decode_forward(&s, &enc, &adapted).unwrap();
    let b = decode_forward(&s, &enc, &base).unwrap();
    assert_eq!(a.max_abs_diff(&b), 0.0);
    assert_eq!(a, b);
}

#[test]
fn identical_seeds_give_identical_logits() {
    let s = stream(&[1, 3, 5, 7], 1);
    let run = || {
        let state = init_model(&tiny_config()).unwrap();
        let enc = encode_images(&[image(8, 5)], &state).unwrap();
        decode_forward(&s, &enc, &state).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn image_blocks_follow_input_order() {
    let state = init_model(&tiny_config()).unwrap();
    let (a, b, c) = (image(8, 1), image(8, 2), image(8, 3));
    let fwd = encode_images(&[a.clone(), b.clone(), c.clone()], &state).unwrap();
    let rev = encode_images(&[c, a, b], &state).unwrap();
    let per = state.config.patches_per_image();
    assert_eq!(fwd.features.rows(), 3 * per);
    assert_eq!(fwd.image_boundaries, vec![0, per, 2 * per, 3 * per]);
    let block = |e: &EncodedStudy, i: usize| e.features.rows_slice(i * per, (i + 1) * per);
    assert_eq!(block(&fwd, 0), block(&rev, 1));
    assert_eq!(block(&fwd, 1), block(&rev, 2));
    assert_eq!(block(&fwd, 2), block(&rev, 0));
}

#[test]
fn image_count_and_shape_errors() {
    let state = init_model(&ModelConfig::default()).unwrap();
    let img = image(56, 0);
    let enc = encode_images(&[img.clone(), img.clone()], &state).unwrap();
    assert_eq!(enc.features.rows(), 32);
    assert!(matches!(encode_images(&vec![img.clone(); 6], &state), Err(ModelError::ImageCount { got: 6, .. })));
    assert!(matches!(encode_images(&[], &state), Err(ModelError::ImageCount { got: 0, .. })));
    assert!(matches!(encode_images(&[image(64, 0)], &state), Err(ModelError::ImageSide { .. })));
}

#[test]
fn overlong_and_out_of_vocab_streams_are_rejected() {
    let state = init_model(&tiny_config()).unwrap();
    let enc = encode_images(&[image(8, 0)], &state).unwrap();
    let long: Vec<u32> = (0..25).map(|i| i % 30).collect();
    assert!(matches!(decode_forward(&stream(&long, 2), &enc, &state), Err(ModelError::StreamTooLong { .. })));
    assert!(matches!(decode_forward(&stream(&[1, 40, 2], 1), &enc, &state), Err(ModelError::TokenOutOfRange { id: 40, .. })));
    assert!(matches!(teacher_forcing_loss(&stream(&[1, 2], 1), &enc, &state), Err(ModelError::EmptyTarget)));
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let mut state = init_model(&tiny_config()).unwrap();
    let (w, b) = state.layout.lm_head;
    state.params_mut()[w] = Matrix::zeros(37, 16);
    state.params_mut()[b] = Matrix::zeros(1, 37);
    let enc = encode_images(&[image(8, 0)], &state).unwrap();
    let loss = teacher_forcing_loss(&stream(&[1, 2, 3, 4, 5], 2), &enc, &state).unwrap();
    assert!((loss - (37f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_give_vanishing_loss() {
    let mut state = init_model(&tiny_config()).unwrap();
    let (w, b) = state.layout.lm_head;
    state.params_mut()[w] = Matrix::zeros(37, 16);
    let mut bias = Matrix::zeros(1, 37);
    bias.set(0, 5, 60.0);
    state.params_mut()[b] = bias;
    let enc = encode_images(&[image(8, 0)], &state).unwrap();
    let loss = teacher_forcing_loss(&stream(&[1, 2, 5, 5, 5, 5], 2), &enc, &state).unwrap();
    assert!(loss < 1e-20, "{loss}");
}

#[test]
fn loss_matches_scalar_log_softmax_oracle() {
    let mut state = init_model(&tiny_config()).unwrap();
    randomize_lora(&mut state);
    let enc = encode_images(&[image(8, 6), image(8, 7)], &state).unwrap();
    let s = stream(&[3, 1, 4, 1, 5, 9, 2, 6, 5, 3], 4);
    let logits = decode_forward(&s, &enc, &state).unwrap();
    // Oracle: explicit max-shifted log-sum-exp per row, averaged over positions
    // prompt_len..len-1 predicting the following token.
    let mut total = 0.0;
    let mut count = 0;
    for row in s.prompt_len..s.len() - 1 {
        let r = logits.row(row);
        let mut max = r[0];
        for &v in r {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for &v in r {
            sum += (v - max).exp();
        }
        let target = s.token_ids[row + 1] as usize;
        total += -(r[target] - max - sum.ln());
        count += 1;
    }
    let oracle = total / count as f64;
    let loss = teacher_forcing_loss(&s, &enc, &state).unwrap();
    assert!((loss - oracle).abs() < 1e-10, "{loss} vs {oracle}");
}

#[test]
fn unused_parameters_get_zero_gradient_and_frozen_groups_none() {
    let mut state = init_model(&tiny_config()).unwrap();
    let s = stream(&[1, 2, 3, 4], 1);
    let imgs = [image(8, 0)];
    let (_, grads) = loss_and_grads(&state, &imgs, &s, LossTargets::TeacherForcing, None).unwrap();
    let tok = grads[state.layout.tok].as_ref().unwrap();
    assert!(tok.row(30).iter().all(|&v| v == 0.0));
    let pos = grads[state.layout.pos].as_ref().unwrap();
    assert!(pos.row(10).iter().all(|&v| v == 0.0));
    assert!(grads[state.layout.patch.0].is_some());

    state.set_frozen([ParamGroup::Encoder]);
    let (_, grads) = loss_and_grads(&state, &imgs, &s, LossTargets::TeacherForcing, None).unwrap();
    for (g, grp) in grads.iter().zip(state.groups()) {
        assert_eq!(g.is_some(), *grp != ParamGroup::Encoder);
    }
}

#[test]
fn cached_inference_matches_full_forward() {
    let mut state = init_model(&tiny_config()).unwrap();
    randomize_lora(&mut state);
    let enc = encode_images(&[image(8, 8), image(8, 9)], &state).unwrap();
    let s = stream(&[2, 7, 1, 8, 2, 8, 1, 8], 3);
    let full = decode_forward(&s, &enc, &state).unwrap();
    let model = InferenceModel::new(&state);
    let mut session = model.session(&enc);
    let first = session.extend(&s.token_ids[..3], &s.section_ids[..3]).unwrap();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff(&first, full.row(2)) < 1e-10);
    for i in 3..s.len() {
        let l = session.extend(&s.token_ids[i..i + 1], &s.section_ids[i..i + 1]).unwrap();
        assert!(diff(&l, full.row(i)) < 1e-10, "position {i}");
    }
}

/// Per-entry relative error. Below 1e-4 in magnitude the denominator is
/// floored, which turns the bound into an absolute one of 1e-8.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[test]
fn gradients_match_central_differences() {
    let mut state = init_model(&ModelConfig { max_positions: 12, ..tiny_config() }).unwrap();
    randomize_lora(&mut state);
    let imgs = [image(8, 1), image(8, 2)];
    let s = stream(&[3, 1, 4, 1, 5, 9, 2, 6], 3);
    let (_, grads) = loss_and_grads(&state, &imgs, &s, LossTargets::TeacherForcing, None).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for p in 0..state.params().len() {
        let g = grads[p].as_ref().expect("all groups trainable");
        for j in 0..state.params()[p].len() {
            let orig = state.params()[p].data()[j];
            state.params_mut()[p].data_mut()[j] = orig + eps;
            let (up, _) = loss_and_grads(&state, &imgs, &s, LossTargets::TeacherForcing, None).unwrap();
            state.params_mut()[p].data_mut()[j] = orig - eps;
            let (down, _) = loss_and_grads(&state, &imgs, &s, LossTargets::TeacherForcing, None).unwrap();
            state.params_mut()[p].data_mut()[j] = orig;
            let err = relative_error(g.data()[j], (up - down) / (2.0 * eps));
            assert!(err < 1e-4, "{} [{j}]: analytic {} numeric {}", state.names()[p], g.data()[j], (up - down) / (2.0 * eps));
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4);
}
