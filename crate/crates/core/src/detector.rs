//! Green-token counting, the one-proportion z-test, and ROC AUC.

use serde::{Deserialize, Serialize};

use crate::engine::Watermarker;
use crate::error::{Error, Result};
use crate::model_state::ModelSource;
use crate::partition::{is_base_green, PartitionConfig, WatermarkKey};
use crate::weights::WeightConfig;

/// Default decision threshold on the z-statistic.
pub const DEFAULT_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMode {
    /// Base keyed partition only; swapped tokens are not recovered.
    KeyOnly,
    /// Re-run the full pipeline on model state to recover post-swap lists.
    Replay,
}

impl std::str::FromStr for DetectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key-only" | "keyonly" | "key_only" => Ok(Self::KeyOnly),
            "replay" => Ok(Self::Replay),
            other => Err(Error::InvalidConfig(format!("unknown detection mode {other:?}"))),
        }
    }
}

/// Model access needed for replay detection.
pub struct ReplayContext<'a> {
    source: &'a dyn ModelSource,
    watermarker: Watermarker,
}

impl<'a> ReplayContext<'a> {
    pub fn new(
        source: &'a dyn ModelSource,
        key: WatermarkKey,
        weight_config: WeightConfig,
        partition_config: PartitionConfig,
    ) -> Result<Self> {
        let watermarker = Watermarker::new(source, key, weight_config, partition_config)?;
        Ok(Self { source, watermarker })
    }

    /// Reuses an existing watermarker (and its precomputed tables).
    pub fn from_watermarker(source: &'a dyn ModelSource, watermarker: Watermarker) -> Self {
        Self { source, watermarker }
    }

    /// Fails unless the source is the model the text was generated with.
    pub fn expect_fingerprint(self, expected: u64) -> Result<Self> {
        let found = self.source.fingerprint();
        if found == expected {
            Ok(self)
        } else {
            Err(Error::FingerprintMismatch { expected, found })
        }
    }

    pub fn gamma(&self) -> f64 {
        self.watermarker.partition_config().gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub green_count: usize,
    pub total: usize,
    pub z: f64,
    pub threshold: f64,
    pub is_watermarked: bool,
    pub mode: DetectionMode,
}

/// Counts positions whose token is green at that position.
///
/// The first position is judged against the partition seeded by the sentinel
/// previous token. Key-only counting needs just the vocabulary size; replay
/// counting needs a [`ReplayContext`].
pub fn count_green(
    tokens: &[u32],
    key: WatermarkKey,
    mode: DetectionMode,
    gamma: f64,
    vocab_size: usize,
    replay: Option<&ReplayContext<'_>>,
) -> Result<(usize, usize)> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut green = 0;
    match mode {
        DetectionMode::KeyOnly => {
            let sentinel = vocab_size as u32;
            for (t, &tok) in tokens.iter().enumerate() {
                let prev = if t == 0 { sentinel } else { tokens[t - 1] };
                if is_base_green(key, prev, tok, gamma, vocab_size)? {
                    green += 1;
                }
            }
        }
        DetectionMode::Replay => {
            let ctx = replay.ok_or(Error::MissingModelSource)?;
            if ctx.source.spec().vocab_size != vocab_size {
                return Err(Error::Dimension(format!(
                    "replay model has {} tokens, detector expects {vocab_size}",
                    ctx.source.spec().vocab_size
                )));
            }
            let rekeyed;
            let wm = if ctx.watermarker.key() == key {
                &ctx.watermarker
            } else {
                rekeyed = ctx.watermarker.rekeyed(key);
                &rekeyed
            };
            let text = ctx.source.text_embeddings();
            for t in 0..tokens.len() {
                let state = ctx.source.step(&tokens[..t])?.ok_or(Error::TraceExhausted(t))?;
                let prev = t.checked_sub(1).map(|i| tokens[i]);
                if wm.plan(&state, text, prev)?.partition.is_green(tokens[t]) {
                    green += 1;
                }
            }
        }
    }
    Ok((green, tokens.len()))
}

/// `(g - gamma T) / sqrt(T gamma (1 - gamma))`.
pub fn z_statistic(green: usize, total: usize, gamma: f64) -> f64 {
    let t = total as f64;
    (green as f64 - gamma * t) / (t * gamma * (1.0 - gamma)).sqrt()
}

pub fn detect(
    tokens: &[u32],
    key: WatermarkKey,
    mode: DetectionMode,
    gamma: f64,
    threshold: f64,
    vocab_size: usize,
    replay: Option<&ReplayContext<'_>>,
) -> Result<DetectionResult> {
    let (green_count, total) = count_green(tokens, key, mode, gamma, vocab_size, replay)?;
    let z = z_statistic(green_count, total, gamma);
    Ok(DetectionResult { green_count, total, z, threshold, is_watermarked: z > threshold, mode })
}

/// Mann-Whitney AUC: the probability a positive outscores a negative, ties
/// counting one half.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(i) = positive.iter().chain(negative).position(|v| v.is_nan()) {
        return Err(Error::NonFinite(i));
    }
    let mut all: Vec<(f64, bool)> =
        positive.iter().map(|&s| (s, true)).chain(negative.iter().map(|&s| (s, false))).collect();
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the number of (positive > negative) pairs plus ties, kept integral.
    let mut twice_wins: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    let pairs = positive.len() as f64 * negative.len() as f64;
    Ok(twice_wins as f64 / 2.0 / pairs)
}
