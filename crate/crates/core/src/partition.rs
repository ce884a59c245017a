//! Green/red vocabulary partitioning.
//!
//! The base split is the keyed KGW list: each token gets a 64-bit PRF score
//!
//! ```text
//! score(i) = mix64(key ^ mix64(prev_token * 0x9E3779B97F4A7C15 ^ i))
//! ```
//!
//! (wrapping multiply, [`mix64`] the SplitMix64 finalizer) and the
//! `ceil(gamma * |V|)` highest scores are green, ties by ascending id. The
//! previous token is the vocabulary size when there is no prefix.
//!
//! On top of that split, the top `ceil(eta * |V|)` tokens by critical weight
//! are swapped into green, evicting the least critical green tokens so both
//! lists keep their size. `eta` shrinks with next-token entropy and grows with
//! how dispersed the critical weights are.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ceil_count, softmax};
use crate::rng::{mix64, GOLDEN_GAMMA};
use crate::weights::{by_weight_asc, by_weight_desc, CriticalWeights};

/// Relative slack when comparing cumulative weight mass against `tau`.
pub const MASS_SLACK: f64 = 1e-12;

/// Secret watermark key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WatermarkKey(pub u64);

impl WatermarkKey {
    /// Parses hex with or without a `0x` prefix.
    pub fn from_hex(text: &str) -> Result<Self> {
        let digits = text.trim().trim_start_matches("0x").trim_start_matches("0X");
        u64::from_str_radix(digits, 16)
            .map(Self)
            .map_err(|e| Error::InvalidConfig(format!("invalid hex key {text:?}: {e}")))
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionAblation {
    #[default]
    Full,
    /// `eta = alpha * rho`
    NoEntropy,
    /// `eta = alpha * (1 - h_norm)`
    NoDensity,
    /// `eta = alpha`
    FixedScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub tau: f64,
    /// A pair is swapped only if the critical token outweighs its victim by
    /// more than this.
    pub margin: f64,
    /// Maximum swaps per step; `None` is unbounded.
    pub swap_cap: Option<usize>,
    pub ablation: PartitionAblation,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            delta: 4.0,
            alpha: 0.27,
            tau: 0.98,
            margin: 0.0,
            swap_cap: None,
            ablation: PartitionAblation::Full,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(&format!("gamma must be in (0, 1), got {}", self.gamma));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(&format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(&format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(&format!("tau must be in (0, 1], got {}", self.tau));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(&format!("margin must be >= 0, got {}", self.margin));
        }
        Ok(())
    }
}

/// Green/red split of the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    green: Vec<bool>,
    green_count: usize,
}

impl Partition {
    pub fn from_mask(green: Vec<bool>) -> Self {
        let green_count = green.iter().filter(|g| **g).count();
        Self { green, green_count }
    }

    pub fn from_green_ids(vocab_size: usize, ids: &[u32]) -> Result<Self> {
        let mut mask = vec![false; vocab_size];
        for &id in ids {
            *mask.get_mut(id as usize).ok_or(Error::TokenOutOfRange { token: id, vocab_size })? = true;
        }
        Ok(Self::from_mask(mask))
    }

    pub fn vocab_size(&self) -> usize {
        self.green.len()
    }

    #[inline]
    pub fn is_green(&self, token: u32) -> bool {
        self.green.get(token as usize).copied().unwrap_or(false)
    }

    pub fn green_count(&self) -> usize {
        self.green_count
    }

    pub fn mask(&self) -> &[bool] {
        &self.green
    }

    pub fn green_ids(&self) -> Vec<u32> {
        (0..self.green.len() as u32).filter(|&t| self.green[t as usize]).collect()
    }

    pub fn red_ids(&self) -> Vec<u32> {
        (0..self.green.len() as u32).filter(|&t| !self.green[t as usize]).collect()
    }
}

/// Per-step quantities behind the partition, kept for audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Normalized entropy of the unbiased next-token distribution.
    pub h_norm: f64,
    /// Weight density: fraction of the vocabulary holding `tau` of the weight mass.
    pub rho: f64,
    /// Fraction of the vocabulary treated as critical.
    pub eta: f64,
    /// Critical red tokens actually moved into green.
    pub swapped: usize,
    pub critical_size: usize,
}

/// What happened during a swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SwapReport {
    /// Critical tokens that started red.
    pub critical_red: usize,
    /// Of those, how many survived the per-step cap.
    pub candidates: usize,
    /// Eligible victims were fewer than candidates by this many.
    pub victim_shortfall: usize,
    /// Pairs rejected by the margin.
    pub gated: usize,
    pub swapped: usize,
}

#[inline]
pub fn prf_score(key: WatermarkKey, prev_token: u32, token: u32) -> u64 {
    mix64(key.0 ^ mix64(u64::from(prev_token).wrapping_mul(GOLDEN_GAMMA) ^ u64::from(token)))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("gamma must be in (0, 1), got {gamma}")))
    }
}

/// Size of the green list.
pub fn green_size(gamma: f64, vocab_size: usize) -> usize {
    ceil_count(gamma, vocab_size)
}

/// Keyed KGW partition seeded by the previous token.
pub fn base_partition(key: WatermarkKey, prev_token: u32, gamma: f64, vocab_size: usize) -> Result<Partition> {
    check_gamma(gamma)?;
    if vocab_size < 2 {
        return Err(Error::DegenerateVocabulary(vocab_size));
    }
    if prev_token as usize > vocab_size {
        return Err(Error::TokenOutOfRange { token: prev_token, vocab_size });
    }
    let m = green_size(gamma, vocab_size);
    let mut scored: Vec<(u64, u32)> = (0..vocab_size as u32).map(|t| (prf_score(key, prev_token, t), t)).collect();
    let cmp = |a: &(u64, u32), b: &(u64, u32)| b.0.cmp(&a.0).then(a.1.cmp(&b.1));
    if m < vocab_size {
        scored.select_nth_unstable_by(m, cmp);
    }
    let mut mask = vec![false; vocab_size];
    for &(_, t) in &scored[..m] {
        mask[t as usize] = true;
    }
    Ok(Partition { green: mask, green_count: m })
}

/// Whether `token` is in the base green list, without building the list.
pub fn is_base_green(key: WatermarkKey, prev_token: u32, token: u32, gamma: f64, vocab_size: usize) -> Result<bool> {
    check_gamma(gamma)?;
    if token as usize >= vocab_size || prev_token as usize > vocab_size {
        return Err(Error::TokenOutOfRange { token: token.max(prev_token), vocab_size });
    }
    let m = green_size(gamma, vocab_size);
    let own = prf_score(key, prev_token, token);
    let ahead = (0..vocab_size as u32)
        .filter(|&t| {
            let s = prf_score(key, prev_token, t);
            s > own || (s == own && t < token)
        })
        .count();
    Ok(ahead < m)
}

/// Shortest prefix of the priority order holding at least `tau` of the total
/// weight, and its size as a fraction of the vocabulary.
///
/// Returns `(|V|, 1.0)` when all weights are zero.
pub fn weight_density(weights: &CriticalWeights, tau: f64) -> (usize, f64) {
    let n = weights.len();
    let total: f64 = weights.psi_tilde.iter().sum();
    if n == 0 || total <= 0.0 {
        return (n, 1.0);
    }
    let target = tau * total - MASS_SLACK * total;
    let mut cum = 0.0;
    let mut size = n;
    for (i, &t) in weights.order.iter().enumerate() {
        cum += weights.weight(t);
        if cum >= target {
            size = i + 1;
            break;
        }
    }
    (size, size as f64 / n as f64)
}

/// Fraction of the vocabulary to protect, in `[0, alpha]`.
pub fn critical_ratio(h_norm: f64, rho: f64, config: &PartitionConfig) -> f64 {
    let certainty = (1.0 - h_norm).clamp(0.0, 1.0);
    let rho = rho.clamp(0.0, 1.0);
    let eta = match config.ablation {
        PartitionAblation::Full => config.alpha * rho * certainty,
        PartitionAblation::NoEntropy => config.alpha * rho,
        PartitionAblation::NoDensity => config.alpha * certainty,
        PartitionAblation::FixedScale => config.alpha,
    };
    eta.clamp(0.0, config.alpha)
}

/// The `ceil(eta * |V|)` highest-priority tokens.
pub fn critical_set(weights: &CriticalWeights, eta: f64) -> &[u32] {
    &weights.order[..ceil_count(eta.clamp(0.0, 1.0), weights.len())]
}

/// Moves critical red tokens into green.
///
/// Candidates are the critical red tokens by descending weight, truncated to
/// the swap cap. Victims are green non-critical tokens by ascending weight.
/// The i-th candidate pairs with the i-th victim and the pair is exchanged
/// when the candidate's weight exceeds the victim's by more than the margin.
pub fn swap_partition(
    base: &Partition,
    critical: &[u32],
    weights: &CriticalWeights,
    config: &PartitionConfig,
) -> Result<(Partition, SwapReport)> {
    let n = base.vocab_size();
    if weights.len() != n {
        return Err(Error::LengthMismatch { left: n, right: weights.len() });
    }
    let mut report = SwapReport::default();
    let mut is_critical = vec![false; n];
    for &t in critical {
        *is_critical.get_mut(t as usize).ok_or(Error::TokenOutOfRange { token: t, vocab_size: n })? = true;
    }

    let psi = &weights.psi_tilde;
    let mut candidates: Vec<u32> = critical.iter().copied().filter(|&t| !base.is_green(t)).collect();
    report.critical_red = candidates.len();
    if candidates.is_empty() {
        return Ok((base.clone(), report));
    }
    candidates.sort_unstable_by(|&a, &b| by_weight_desc(psi, a, b));
    if let Some(cap) = config.swap_cap {
        candidates.truncate(cap);
    }
    report.candidates = candidates.len();

    let mut victims: Vec<u32> = (0..n as u32).filter(|&t| base.is_green(t) && !is_critical[t as usize]).collect();
    let wanted = candidates.len();
    if victims.len() > wanted {
        victims.select_nth_unstable_by(wanted, |&a, &b| by_weight_asc(psi, a, b));
        victims.truncate(wanted);
    }
    victims.sort_unstable_by(|&a, &b| by_weight_asc(psi, a, b));
    report.victim_shortfall = wanted.saturating_sub(victims.len());

    let mut green = base.green.clone();
    for (&a, &b) in candidates.iter().zip(&victims) {
        if psi[a as usize] - psi[b as usize] > config.margin {
            green[a as usize] = true;
            green[b as usize] = false;
            report.swapped += 1;
        } else {
            report.gated += 1;
        }
    }
    Ok((Partition { green, green_count: base.green_count }, report))
}

/// Softmax of the logits with `delta` added to every green entry.
pub fn watermark_distribution(logits: &[f64], partition: &Partition, delta: f64) -> Result<Vec<f64>> {
    if logits.len() != partition.vocab_size() {
        return Err(Error::LengthMismatch { left: logits.len(), right: partition.vocab_size() });
    }
    let biased: Vec<f64> = logits.iter().zip(partition.mask()).map(|(&l, &g)| if g { l + delta } else { l }).collect();
    softmax(&biased)
}
