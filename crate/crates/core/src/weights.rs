//! Per-step semantic-critical weights of every vocabulary token.
//!
//! Two signals are computed for each token `k`: the attention-weighted cosine
//! between its text embedding and the vision embeddings, and the cosine between
//! its text embedding and the current hidden state. Each is z-scored over the
//! vocabulary, the two are mixed with weight `omega`, and the mix is min-max
//! scaled into `[0, 1]`. The resulting priority order drives the partitioner.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_state::StepState;
use crate::numerics::{
    cosine_from_parts, cosine_similarity, dot, l2_norm, minmax_normalize, zscore_standardize, RealMatrix,
    DEFAULT_EPSILON,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightAblation {
    #[default]
    Full,
    /// Vision attention replaced by the uniform distribution.
    NoAttention,
    /// Context weight only (`omega = 0`).
    NoVision,
    /// Vision weight only (`omega = 1`).
    NoContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    pub omega: f64,
    pub epsilon: f64,
    pub ablation: WeightAblation,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { omega: 0.50, epsilon: DEFAULT_EPSILON, ablation: WeightAblation::Full }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidConfig(format!("omega must be in [0, 1], got {}", self.omega)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Fusion weight after applying the ablation.
    pub fn effective_omega(&self) -> f64 {
        match self.ablation {
            WeightAblation::NoVision => 0.0,
            WeightAblation::NoContext => 1.0,
            WeightAblation::Full | WeightAblation::NoAttention => self.omega,
        }
    }
}

/// Normalized weights and the vocabulary sorted by them.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalWeights {
    /// One weight in `[0, 1]` per token id.
    pub psi_tilde: Vec<f64>,
    /// Token ids by descending weight, ties by ascending id.
    pub order: Vec<u32>,
}

impl CriticalWeights {
    /// Builds the priority order for already-normalized weights.
    pub fn from_normalized(psi_tilde: Vec<f64>) -> Self {
        let order = priority_order(&psi_tilde);
        Self { psi_tilde, order }
    }

    pub fn len(&self) -> usize {
        self.psi_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi_tilde.is_empty()
    }

    #[inline]
    pub fn weight(&self, token: u32) -> f64 {
        self.psi_tilde[token as usize]
    }
}

/// Descending by weight, ascending id on ties.
#[inline]
pub(crate) fn by_weight_desc(weights: &[f64], a: u32, b: u32) -> Ordering {
    weights[b as usize].total_cmp(&weights[a as usize]).then(a.cmp(&b))
}

/// Ascending by weight, ascending id on ties.
#[inline]
pub(crate) fn by_weight_asc(weights: &[f64], a: u32, b: u32) -> Ordering {
    weights[a as usize].total_cmp(&weights[b as usize]).then(a.cmp(&b))
}

/// Maps an f64 to a u64 whose unsigned order matches `f64::total_cmp`.
#[inline]
fn total_order_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn priority_order(weights: &[f64]) -> Vec<u32> {
    // Packing (inverted weight, id) into one integer sorts descending by
    // weight with ascending-id ties, without indirect loads in the compare.
    let mut keys: Vec<u128> =
        weights.iter().enumerate().map(|(i, &w)| ((!total_order_key(w) as u128) << 32) | i as u128).collect();
    keys.sort_unstable();
    keys.into_iter().map(|k| k as u32).collect()
}

fn check_embeddings(text: &RealMatrix, vision: &RealMatrix) -> Result<()> {
    if text.cols() != vision.cols() {
        return Err(Error::Dimension(format!(
            "text embeddings have width {}, vision embeddings {}",
            text.cols(),
            vision.cols()
        )));
    }
    Ok(())
}

/// `psi_v(k) = sum_j attention[j] * cos(E_v[j], E_t[k])`.
pub fn vision_critical_weights(attention: &[f32], text: &RealMatrix, vision: &RealMatrix) -> Result<Vec<f64>> {
    check_embeddings(text, vision)?;
    if attention.len() != vision.rows() {
        return Err(Error::Dimension(format!(
            "{} attention weights for {} vision tokens",
            attention.len(),
            vision.rows()
        )));
    }
    text.iter_rows()
        .map(|token| {
            attention
                .iter()
                .zip(vision.iter_rows())
                .try_fold(0.0, |acc, (&a, v)| Ok(acc + f64::from(a) * cosine_similarity(v, token)?))
        })
        .collect()
}

/// `psi_c(k) = cos(hidden, E_t[k])`.
pub fn context_critical_weights(hidden: &[f32], text: &RealMatrix) -> Result<Vec<f64>> {
    if hidden.len() != text.cols() {
        return Err(Error::Dimension(format!(
            "hidden state has length {}, embeddings have width {}",
            hidden.len(),
            text.cols()
        )));
    }
    text.iter_rows().map(|token| cosine_similarity(hidden, token)).collect()
}

/// Standardize each source, mix with `omega`, min-max scale, and sort.
pub fn fuse_and_normalize(psi_v: &[f64], psi_c: &[f64], config: &WeightConfig) -> Result<CriticalWeights> {
    if psi_v.len() != psi_c.len() {
        return Err(Error::LengthMismatch { left: psi_v.len(), right: psi_c.len() });
    }
    config.validate()?;
    let omega = config.effective_omega();
    let zv = zscore_standardize(psi_v, config.epsilon)?;
    let zc = zscore_standardize(psi_c, config.epsilon)?;
    let fused: Vec<f64> = zv.iter().zip(&zc).map(|(v, c)| omega * v + (1.0 - omega) * c).collect();
    Ok(CriticalWeights::from_normalized(minmax_normalize(&fused)?))
}

/// Embedding-derived quantities that stay fixed for a whole generation.
///
/// The vision/text cosine table is `n_vision x vocab_size` and is evaluated
/// with the same kernel as [`vision_critical_weights`], so both paths agree
/// bit-for-bit.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    vocab_size: usize,
    n_vision: usize,
    text_norms: Vec<f64>,
    vision_text_cos: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(text: &RealMatrix, vision: &RealMatrix) -> Result<Self> {
        check_embeddings(text, vision)?;
        let text_norms: Vec<f64> = text.iter_rows().map(l2_norm).collect();
        let mut vision_text_cos = Vec::with_capacity(vision.rows() * text.rows());
        for v in vision.iter_rows() {
            let vnorm = l2_norm(v);
            vision_text_cos.extend(
                text.iter_rows().zip(&text_norms).map(|(t, &tnorm)| cosine_from_parts(dot(v, t), vnorm, tnorm)),
            );
        }
        Ok(Self { vocab_size: text.rows(), n_vision: vision.rows(), text_norms, vision_text_cos })
    }

    pub fn vision_weights(&self, attention: &[f32]) -> Result<Vec<f64>> {
        if attention.len() != self.n_vision {
            return Err(Error::Dimension(format!(
                "{} attention weights for {} vision tokens",
                attention.len(),
                self.n_vision
            )));
        }
        let mut out = vec![0.0; self.vocab_size];
        for (&a, row) in attention.iter().zip(self.vision_text_cos.chunks_exact(self.vocab_size)) {
            let a = f64::from(a);
            for (acc, &c) in out.iter_mut().zip(row) {
                *acc += a * c;
            }
        }
        Ok(out)
    }

    pub fn context_weights(&self, hidden: &[f32], text: &RealMatrix) -> Result<Vec<f64>> {
        if hidden.len() != text.cols() || text.rows() != self.vocab_size {
            return Err(Error::Dimension(format!(
                "hidden state of length {} against {}x{} embeddings",
                hidden.len(),
                text.rows(),
                text.cols()
            )));
        }
        let hnorm = l2_norm(hidden);
        Ok(text
            .iter_rows()
            .zip(&self.text_norms)
            .map(|(t, &tnorm)| cosine_from_parts(dot(hidden, t), hnorm, tnorm))
            .collect())
    }

    /// Full weighting for one step, honoring the ablation switches.
    pub fn critical_weights(
        &self,
        state: &StepState,
        text: &RealMatrix,
        config: &WeightConfig,
    ) -> Result<CriticalWeights> {
        let psi_v = match config.ablation {
            WeightAblation::NoAttention => {
                let uniform = vec![1.0 / self.n_vision as f32; self.n_vision];
                self.vision_weights(&uniform)?
            }
            _ => self.vision_weights(&state.vision_attention)?,
        };
        let psi_c = self.context_weights(&state.hidden, text)?;
        fuse_and_normalize(&psi_v, &psi_c, config)
    }
}
