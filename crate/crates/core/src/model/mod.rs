//! Multi-image encoder-to-decoder.
//!
//! Each image is cut into square patches, linearly embedded with a learned
//! per-patch position embedding, layer-normalised and projected to the
//! decoder width. The features of all images of a study are concatenated and
//! attended to by every decoder layer. The decoder input at each position is
//! the sum of token, position and section embeddings. LoRA factors adapt the
//! query and key projections of decoder self-attention.

mod augment;
mod checkpoint;
mod forward;
mod infer;

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::rng_from;
use crate::tensor::{matmul, Matrix};
use crate::tokenizer::NUM_SECTIONS;

pub use augment::{augment_image, augment_with, prepare_images, AugmentParams};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{decode_forward, EncodedStudy, encode_images, loss_and_grads, sequence_log_prob, teacher_forcing_loss, LossTargets};
pub use infer::{DecoderSession, InferenceModel};

pub const PIXEL_MEAN: f64 = 0.25;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("a study needs 1..={max} images, got {got}")]
    ImageCount { got: usize, max: usize },
    #[error("image side {got} does not match the model input side {expected}")]
    ImageSide { got: usize, expected: usize },
    #[error("stream of {got} tokens exceeds {max} positions")]
    StreamTooLong { got: usize, max: usize },
    #[error("token id {id} outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("stream has no target tokens")]
    EmptyTarget,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: BTreeSet<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 32.0, dropout: 0.1, targets: [LoraTarget::Query, LoraTarget::Key].into() }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_sections: usize,
    pub section_embeddings: bool,
    /// Side of the (cropped) model input image.
    pub image_side: usize,
    pub patch_size: usize,
    pub encoder_width: usize,
    pub max_images: usize,
    pub lora: LoraConfig,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_width: 128,
            vocab_size: 512 + crate::tokenizer::NUM_SPECIALS,
            max_positions: 512,
            num_sections: NUM_SECTIONS,
            section_embeddings: true,
            image_side: 56,
            patch_size: 14,
            encoder_width: 64,
            max_images: crate::corpus::MAX_IMAGES_PER_STUDY,
            lora: LoraConfig::default(),
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.lora.rank == 0 {
            return bad("lora.rank must be at least 1".into());
        }
        if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return bad(format!("image_side {} must be a multiple of patch_size {}", self.image_side, self.patch_size));
        }
        if self.layers == 0 || self.ff_width == 0 || self.encoder_width == 0 {
            return bad("layers, ff_width and encoder_width must be positive".into());
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.max_images == 0 {
            return bad("vocab_size, max_positions and max_images must be positive".into());
        }
        if self.num_sections != NUM_SECTIONS {
            return bad(format!("num_sections must be {NUM_SECTIONS}"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.lora.dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn patches_per_image(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }
}

/// Parameters added by LoRA: one `(d × r)` and one `(r × d)` factor per
/// targeted projection per layer.
pub fn lora_param_count(layers: usize, d_model: usize, rank: usize, targets: usize) -> usize {
    layers * targets * (d_model * rank + rank * d_model)
}

/// `W + (alpha / rank) · B·A`, leaving `W` untouched.
pub fn apply_lora_delta(w: &Matrix, a: &Matrix, b: &Matrix, alpha: f64, rank: usize) -> Result<Matrix, ModelError> {
    if a.rows() != rank || b.cols() != rank || b.rows() != w.rows() || a.cols() != w.cols() {
        return Err(ModelError::Shape(format!(
            "W {:?}, A {:?}, B {:?} with rank {rank}",
            w.shape(),
            a.shape(),
            b.shape()
        )));
    }
    let mut delta = matmul(b, a);
    delta.scale_in_place(alpha / rank as f64);
    delta.add_assign(w);
    Ok(delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Lora,
}

impl ParamGroup {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ParamGroup::Encoder),
            1 => Some(ParamGroup::Decoder),
            2 => Some(ParamGroup::Lora),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerIds {
    pub ln1: (usize, usize),
    pub q: (usize, usize),
    pub k: (usize, usize),
    pub v: (usize, usize),
    pub o: (usize, usize),
    /// `(A, B)` factors per target.
    pub lora_q: Option<(usize, usize)>,
    pub lora_k: Option<(usize, usize)>,
    pub ln2: (usize, usize),
    pub cq: (usize, usize),
    pub ck: (usize, usize),
    pub cv: (usize, usize),
    pub co: (usize, usize),
    pub ln3: (usize, usize),
    pub ff1: (usize, usize),
    pub ff2: (usize, usize),
}

/// Indices of every parameter tensor in [`ModelState::params`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub patch: (usize, usize),
    pub patch_pos: usize,
    pub enc_ln: (usize, usize),
    pub enc_proj: (usize, usize),
    pub tok: usize,
    pub pos: usize,
    pub sec: usize,
    pub layers: Vec<LayerIds>,
    pub final_ln: (usize, usize),
    pub lm_head: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub(crate) params: Vec<Matrix>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    pub(crate) layout: Layout,
    frozen: BTreeSet<ParamGroup>,
}

struct Builder<R: Rng> {
    rng: R,
    params: Vec<Matrix>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
}

impl<R: Rng> Builder<R> {
    fn push(&mut self, name: String, group: ParamGroup, m: Matrix) -> usize {
        self.params.push(m);
        self.names.push(name);
        self.groups.push(group);
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, bound: f64) -> usize {
        let m = Matrix::from_fn(rows, cols, |_, _| self.rng.gen_range(-bound..=bound));
        self.push(name, group, m)
    }

    /// Weight `(out × in)` plus bias `(1 × out)`.
    fn linear(&mut self, name: &str, group: ParamGroup, out: usize, inp: usize) -> (usize, usize) {
        let w = self.uniform(format!("{name}.weight"), group, out, inp, 1.0 / (inp as f64).sqrt());
        let b = self.push(format!("{name}.bias"), group, Matrix::zeros(1, out));
        (w, b)
    }

    fn layer_norm(&mut self, name: &str, group: ParamGroup, d: usize) -> (usize, usize) {
        let g = self.push(format!("{name}.gamma"), group, Matrix::from_vec(1, d, vec![1.0; d]));
        let b = self.push(format!("{name}.beta"), group, Matrix::zeros(1, d));
        (g, b)
    }

    fn lora(&mut self, name: &str, d: usize, rank: usize) -> (usize, usize) {
        let a = self.uniform(format!("{name}.lora_a"), ParamGroup::Lora, rank, d, 1.0 / (d as f64).sqrt());
        let b = self.push(format!("{name}.lora_b"), ParamGroup::Lora, Matrix::zeros(d, rank));
        (a, b)
    }
}

/// Deterministic initialisation from `config.seed`; LoRA `B` factors start at zero.
pub fn init_model(config: &ModelConfig) -> Result<ModelState, ModelError> {
    config.validate()?;
    let d = config.d_model;
    let patch_dim = config.patch_size * config.patch_size;
    let mut b = Builder { rng: rng_from(config.seed), params: Vec::new(), names: Vec::new(), groups: Vec::new() };
    use ParamGroup::{Decoder as Dec, Encoder as Enc};

    let patch = b.linear("encoder.patch", Enc, config.encoder_width, patch_dim);
    let patch_pos = b.uniform("encoder.patch_pos".into(), Enc, config.patches_per_image(), config.encoder_width, 0.02);
    let enc_ln = b.layer_norm("encoder.ln", Enc, config.encoder_width);
    let enc_proj = b.linear("encoder.proj", Enc, d, config.encoder_width);

    let tok = b.uniform("decoder.tok_emb".into(), Dec, config.vocab_size, d, 0.1);
    let pos = b.uniform("decoder.pos_emb".into(), Dec, config.max_positions, d, 0.02);
    let sec = b.uniform("decoder.sec_emb".into(), Dec, config.num_sections, d, 0.02);
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = format!("decoder.layer{l}");
        let ln1 = b.layer_norm(&format!("{p}.ln1"), Dec, d);
        let q = b.linear(&format!("{p}.self.q"), Dec, d, d);
        let k = b.linear(&format!("{p}.self.k"), Dec, d, d);
        let v = b.linear(&format!("{p}.self.v"), Dec, d, d);
        let o = b.linear(&format!("{p}.self.o"), Dec, d, d);
        let lora_q = config.lora.targets.contains(&LoraTarget::Query).then(|| b.lora(&format!("{p}.self.q"), d, config.lora.rank));
        let lora_k = config.lora.targets.contains(&LoraTarget::Key).then(|| b.lora(&format!("{p}.self.k"), d, config.lora.rank));
        let ln2 = b.layer_norm(&format!("{p}.ln2"), Dec, d);
        let cq = b.linear(&format!("{p}.cross.q"), Dec, d, d);
        let ck = b.linear(&format!("{p}.cross.k"), Dec, d, d);
        let cv = b.linear(&format!("{p}.cross.v"), Dec, d, d);
        let co = b.linear(&format!("{p}.cross.o"), Dec, d, d);
        let ln3 = b.layer_norm(&format!("{p}.ln3"), Dec, d);
        let ff1 = b.linear(&format!("{p}.ff1"), Dec, config.ff_width, d);
        let ff2 = b.linear(&format!("{p}.ff2"), Dec, d, config.ff_width);
        layers.push(LayerIds { ln1, q, k, v, o, lora_q, lora_k, ln2, cq, ck, cv, co, ln3, ff1, ff2 });
    }
    let final_ln = b.layer_norm("decoder.final_ln", Dec, d);
    let lm_head = b.linear("decoder.lm_head", Dec, config.vocab_size, d);

    let layout = Layout { patch, patch_pos, enc_ln, enc_proj, tok, pos, sec, layers, final_ln, lm_head };
    Ok(ModelState {
        config: config.clone(),
        params: b.params,
        names: b.names,
        groups: b.groups,
        layout,
        frozen: BTreeSet::new(),
    })
}

impl ModelState {
    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn frozen(&self) -> &BTreeSet<ParamGroup> {
        &self.frozen
    }

    pub fn set_frozen(&mut self, groups: impl IntoIterator<Item = ParamGroup>) {
        self.frozen = groups.into_iter().collect();
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.groups.iter().map(|g| !self.frozen.contains(g)).collect()
    }

    pub fn num_params(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| group.is_none_or(|want| **g == want))
            .map(|(p, _)| p.len())
            .sum()
    }

    /// Concatenated parameter bytes of one group, for freeze checks.
    pub fn group_digest(&self, group: ParamGroup) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (p, g) in self.params.iter().zip(&self.groups) {
            if *g == group {
                for v in p.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn from_parts(config: ModelConfig, named: Vec<(String, ParamGroup, Matrix)>, frozen: BTreeSet<ParamGroup>) -> Result<Self, ModelError> {
        let mut state = init_model(&config)?;
        if named.len() != state.params.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, found {}", state.params.len(), named.len())));
        }
        for (name, group, m) in named {
            let idx = state
                .param_index(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if state.groups[idx] != group || state.params[idx].shape() != m.shape() {
                return Err(ModelError::Checkpoint(format!("tensor `{name}` has the wrong group or shape")));
            }
            state.params[idx] = m;
        }
        state.frozen = frozen;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_lora_b_is_zero() {
        let cfg = ModelConfig::default();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        for (p, n) in a.params().iter().zip(a.names()) {
            if n.ends_with("lora_b") {
                assert!(p.data().iter().all(|&v| v == 0.0));
            }
            if n.ends_with("lora_a") {
                assert!(p.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let cfg = ModelConfig { d_model: 63, heads: 8, ..Default::default() };
        assert!(matches!(init_model(&cfg), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn lora_counts() {
        assert_eq!(lora_param_count(6, 768, 8, 2), 147_456);
        assert_eq!(lora_param_count(6, 768, 0, 2), 0);
        // 2 layers × 2 targets × (64·8 + 8·64)
        assert_eq!(lora_param_count(2, 64, 8, 2), 4096);
        let state = init_model(&ModelConfig::default()).unwrap();
        assert_eq!(state.num_params(Some(ParamGroup::Lora)), 4096);
    }

    #[test]
    fn lora_delta_arithmetic() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let a = Matrix::from_vec(1, 2, vec![1.0, -1.0]);
        let b = Matrix::from_vec(2, 1, vec![2.0, 0.5]);
        // B·A = [[2, -2], [0.5, -0.5]], scaled by alpha / rank = 4.
        let out = apply_lora_delta(&w, &a, &b, 4.0, 1).unwrap();
        assert_eq!(out.data(), &[9.0, -6.0, 5.0, 2.0]);
        let doubled = apply_lora_delta(&w, &a, &b, 8.0, 1).unwrap();
        for i in 0..4 {
            assert_eq!(doubled.data()[i] - w.data()[i], 2.0 * (out.data()[i] - w.data()[i]));
        }
        let zero_b = Matrix::zeros(2, 1);
        assert_eq!(apply_lora_delta(&w, &a, &zero_b, 32.0, 1).unwrap(), w);
        assert!(apply_lora_delta(&w, &a, &Matrix::zeros(3, 1), 1.0, 1).is_err());
    }
}

#[cfg(test)]
pub(crate) mod model_tests {
    include!("tests.rs");
}
