//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamGrads;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; nothing changed.
    SkippedNonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    skipped: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { config, step: 0, skipped: 0, m: zeros(), v: zeros() }
    }

    /// Applied updates so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// One bias-corrected update of every parameter that is trainable and
    /// has a gradient. Weight decay shrinks the parameter directly by
    /// `lr · wd · p`, outside the adaptive term.
    pub fn update(&mut self, params: &mut [Matrix], grads: &ParamGrads, trainable: &[bool], lr: f64) -> StepOutcome {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        assert_eq!(params.len(), trainable.len(), "one trainable flag per parameter");
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient at step {}; update skipped", self.step + 1);
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let Some(g) = grads[i].as_ref().filter(|_| trainable[i]) else { continue };
            assert_eq!(g.shape(), params[i].shape(), "gradient shape for parameter {i}");
            let (p, m, v) = (params[i].data_mut(), self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[j]);
            }
        }
        StepOutcome::Applied
    }
}

/// Global L2 norm over all present gradients.
pub fn grad_norm(grads: &ParamGrads) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// `acc += g` slot by slot, allocating on first contribution.
pub fn accumulate(acc: &mut ParamGrads, grads: ParamGrads) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            (_, None) => {}
        }
    }
}
