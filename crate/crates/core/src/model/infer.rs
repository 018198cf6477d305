//! Incremental decoding with cached self-attention keys and values.

use std::sync::Arc;

use super::forward::EncodedStudy;
use super::{apply_lora_delta, ModelError, ModelState};
use crate::autograd::{attention_forward, gelu, layer_norm_rows};
use crate::tensor::{matmul_nt, Matrix};

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = matmul_nt(x, w);
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    out
}

/// Evaluation-mode view of a model with LoRA deltas merged into the
/// query/key weights.
pub struct InferenceModel<'a> {
    state: &'a ModelState,
    query: Vec<Matrix>,
    key: Vec<Matrix>,
}

impl<'a> InferenceModel<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        let cfg = &state.config;
        let p = &state.params;
        let merge = |base: usize, lora: Option<(usize, usize)>| match lora {
            Some((a, b)) => apply_lora_delta(&p[base], &p[a], &p[b], cfg.lora.alpha, cfg.lora.rank)
                .expect("lora factor shapes follow the config"),
            None => p[base].clone(),
        };
        let query = state.layout.layers.iter().map(|l| merge(l.q.0, l.lora_q)).collect();
        let key = state.layout.layers.iter().map(|l| merge(l.k.0, l.lora_k)).collect();
        Self { state, query, key }
    }

    pub fn state(&self) -> &ModelState {
        self.state
    }

    /// Starts an empty decoding session over one encoded study.
    pub fn session(&self, enc: &EncodedStudy) -> DecoderSession<'_> {
        let p = &self.state.params;
        let cross = self
            .state
            .layout
            .layers
            .iter()
            .map(|l| (linear(&enc.features, &p[l.ck.0], &p[l.ck.1]), linear(&enc.features, &p[l.cv.0], &p[l.cv.1])))
            .collect();
        let layers = self.state.config.layers;
        DecoderSession {
            model: self,
            cross: Arc::new(cross),
            keys: vec![Matrix::zeros(0, 0); layers],
            values: vec![Matrix::zeros(0, 0); layers],
            len: 0,
        }
    }
}

#[derive(Clone)]
pub struct DecoderSession<'m> {
    model: &'m InferenceModel<'m>,
    cross: Arc<Vec<(Matrix, Matrix)>>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
}

impl DecoderSession<'_> {
    /// Number of positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Maximum number of positions.
    pub fn capacity(&self) -> usize {
        self.model.state.config.max_positions
    }

    pub fn vocab_size(&self) -> usize {
        self.model.state.config.vocab_size
    }

    /// Appends tokens at the next positions and returns the logits predicted
    /// after the last of them.
    pub fn extend(&mut self, ids: &[u32], sections: &[u8]) -> Result<Vec<f64>, ModelError> {
        let state = self.model.state;
        let cfg = &state.config;
        let lay = &state.layout;
        let p = &state.params;
        assert_eq!(ids.len(), sections.len());
        assert!(!ids.is_empty(), "extend needs at least one token");
        if self.len + ids.len() > cfg.max_positions {
            return Err(ModelError::StreamTooLong { got: self.len + ids.len(), max: cfg.max_positions });
        }
        if let Some(&id) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
        let d = cfg.d_model;
        let mut x = Matrix::zeros(ids.len(), d);
        for (r, (&t, &s)) in ids.iter().zip(sections).enumerate() {
            let row = x.row_mut(r);
            row.copy_from_slice(p[lay.tok].row(t as usize));
            for (o, v) in row.iter_mut().zip(p[lay.pos].row(self.len + r)) {
                *o += v;
            }
            if cfg.section_embeddings {
                for (o, v) in row.iter_mut().zip(p[lay.sec].row(s as usize)) {
                    *o += v;
                }
            }
        }
        for (l, layer) in lay.layers.iter().enumerate() {
            let h = layer_norm_rows(&x, &p[layer.ln1.0], &p[layer.ln1.1]);
            let q = linear(&h, &self.model.query[l], &p[layer.q.1]);
            let k = linear(&h, &self.model.key[l], &p[layer.k.1]);
            let v = linear(&h, &p[layer.v.0], &p[layer.v.1]);
            self.keys[l].append_rows(&k);
            self.values[l].append_rows(&v);
            let (att, _) = attention_forward(&q, &self.keys[l], &self.values[l], cfg.heads, true);
            x.add_assign(&linear(&att, &p[layer.o.0], &p[layer.o.1]));

            let h = layer_norm_rows(&x, &p[layer.ln2.0], &p[layer.ln2.1]);
            let q = linear(&h, &p[layer.cq.0], &p[layer.cq.1]);
            let (ck, cv) = &self.cross[l];
            let (att, _) = attention_forward(&q, ck, cv, cfg.heads, false);
            x.add_assign(&linear(&att, &p[layer.co.0], &p[layer.co.1]));

            let h = layer_norm_rows(&x, &p[layer.ln3.0], &p[layer.ln3.1]);
            let mut f = linear(&h, &p[layer.ff1.0], &p[layer.ff1.1]);
            f.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            x.add_assign(&linear(&f, &p[layer.ff2.0], &p[layer.ff2.1]));
        }
        self.len += ids.len();
        let last = x.rows_slice(x.rows() - 1, x.rows());
        let h = layer_norm_rows(&last, &p[lay.final_ln.0], &p[lay.final_ln.1]);
        Ok(linear(&h, &p[lay.lm_head.0], &p[lay.lm_head.1]).into_vec())
    }
}
