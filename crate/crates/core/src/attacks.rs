//! Token-level stand-ins for text-space watermark removal attacks.
//!
//! Random draws come from one [`SplitMix64`] stream seeded by the config, in
//! this order:
//!
//! * Insert: per input position, one uniform decides insertion and, if it
//!   fires, a second picks the inserted id.
//! * Delete: one uniform per input position.
//! * Synonym: one uniform per position decides replacement and, if it fires,
//!   a second picks one of the `neighbor_k` nearest neighbors.
//! * ParaphraseProxy: a Fisher-Yates shuffle inside each window of `window`
//!   tokens (back to front), then Synonym on the shuffled sequence.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_from_parts, dot, l2_norm, RealMatrix};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Insert,
    Delete,
    Synonym,
    #[serde(rename = "paraphrase")]
    ParaphraseProxy,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Insert => "insert",
            Self::Delete => "delete",
            Self::Synonym => "synonym",
            Self::ParaphraseProxy => "paraphrase",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "insert" => Ok(Self::Insert),
            "delete" => Ok(Self::Delete),
            "synonym" => Ok(Self::Synonym),
            "paraphrase" | "paraphrase-proxy" => Ok(Self::ParaphraseProxy),
            other => Err(Error::InvalidConfig(format!("unknown attack kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub rate: f64,
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_neighbor_k")]
    pub neighbor_k: usize,
}

fn default_window() -> usize {
    5
}

fn default_neighbor_k() -> usize {
    5
}

impl AttackConfig {
    pub fn new(kind: AttackKind, rate: f64, seed: u64) -> Self {
        Self { kind, rate, seed, window: default_window(), neighbor_k: default_neighbor_k() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidConfig(format!("attack rate must be in [0, 1], got {}", self.rate)));
        }
        if self.window == 0 || self.neighbor_k == 0 {
            return Err(Error::InvalidConfig("window and neighbor_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Nearest neighbors under cosine similarity in the text embedding table,
/// computed on demand and cached.
pub struct NeighborIndex<'a> {
    text: &'a RealMatrix,
    norms: Vec<f64>,
    k: usize,
    cache: HashMap<u32, Vec<u32>>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(text: &'a RealMatrix, k: usize) -> Self {
        let norms = text.iter_rows().map(l2_norm).collect();
        Self { text, norms, k, cache: HashMap::new() }
    }

    /// The `k` most similar other tokens, most similar first, ties by id.
    pub fn neighbors(&mut self, token: u32) -> &[u32] {
        let (text, norms, k) = (self.text, &self.norms, self.k);
        self.cache.entry(token).or_insert_with(|| {
            let query = text.row(token as usize);
            let qnorm = norms[token as usize];
            let mut scored: Vec<(f64, u32)> = text
                .iter_rows()
                .zip(norms)
                .enumerate()
                .filter(|(i, _)| *i as u32 != token)
                .map(|(i, (row, &n))| (cosine_from_parts(dot(query, row), qnorm, n), i as u32))
                .collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            let k = k.min(scored.len());
            if k < scored.len() {
                scored.select_nth_unstable_by(k, cmp);
                scored.truncate(k);
            }
            scored.sort_unstable_by(cmp);
            scored.into_iter().map(|(_, t)| t).collect()
        })
    }
}

fn synonym_pass(tokens: &mut [u32], rate: f64, rng: &mut SplitMix64, neighbors: &mut NeighborIndex<'_>) {
    for tok in tokens.iter_mut() {
        if rng.next_f64() < rate {
            let pool = neighbors.neighbors(*tok);
            if !pool.is_empty() {
                *tok = pool[rng.next_index(pool.len())];
            }
        }
    }
}

/// Applies one attack. `text` supplies the vocabulary size and, for the
/// substitution attacks, the neighbor structure.
pub fn apply_attack(tokens: &[u32], config: &AttackConfig, text: &RealMatrix) -> Result<Vec<u32>> {
    config.validate()?;
    let vocab_size = text.rows();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::TokenOutOfRange { token: bad, vocab_size });
    }
    if tokens.is_empty() && config.kind != AttackKind::Insert {
        return Err(Error::EmptySequence);
    }
    let mut rng = SplitMix64::new(config.seed);
    let rate = config.rate;
    let out = match config.kind {
        AttackKind::Insert => {
            let mut out = Vec::with_capacity(tokens.len() + tokens.len() / 4);
            for &tok in tokens {
                if rng.next_f64() < rate {
                    out.push(rng.next_index(vocab_size) as u32);
                }
                out.push(tok);
            }
            out
        }
        AttackKind::Delete => tokens.iter().copied().filter(|_| rng.next_f64() >= rate).collect(),
        AttackKind::Synonym => {
            let mut out = tokens.to_vec();
            synonym_pass(&mut out, rate, &mut rng, &mut NeighborIndex::new(text, config.neighbor_k));
            out
        }
        AttackKind::ParaphraseProxy => {
            let mut out = tokens.to_vec();
            for chunk in out.chunks_mut(config.window) {
                for i in (1..chunk.len()).rev() {
                    let j = rng.next_index(i + 1);
                    chunk.swap(i, j);
                }
            }
            synonym_pass(&mut out, rate, &mut rng, &mut NeighborIndex::new(text, config.neighbor_k));
            out
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_similarity;

    fn table(vocab: usize, dim: usize, seed: u64) -> RealMatrix {
        let mut rng = SplitMix64::new(seed);
        RealMatrix::new(vocab, dim, (0..vocab * dim).map(|_| rng.next_normal() as f32).collect()).unwrap()
    }

    fn is_subsequence(short: &[u32], long: &[u32]) -> bool {
        let mut it = long.iter();
        short.iter().all(|s| it.any(|l| l == s))
    }

    #[test]
    fn zero_rate_is_identity() {
        let text = table(64, 8, 1);
        let tokens: Vec<u32> = (0..30).map(|i| (i * 7) % 64).collect();
        for kind in [AttackKind::Insert, AttackKind::Delete, AttackKind::Synonym] {
            assert_eq!(apply_attack(&tokens, &AttackConfig::new(kind, 0.0, 42), &text).unwrap(), tokens);
        }
    }

    #[test]
    fn full_delete_empties() {
        let text = table(64, 8, 1);
        let out = apply_attack(&[1, 2, 3], &AttackConfig::new(AttackKind::Delete, 1.0, 42), &text).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn insert_and_delete_keep_subsequence() {
        let text = table(64, 8, 2);
        let tokens: Vec<u32> = (0..100).map(|i| (i * 13) % 64).collect();
        let ins = apply_attack(&tokens, &AttackConfig::new(AttackKind::Insert, 0.3, 5), &text).unwrap();
        assert!(ins.len() > tokens.len());
        assert!(is_subsequence(&tokens, &ins));
        let del = apply_attack(&tokens, &AttackConfig::new(AttackKind::Delete, 0.3, 5), &text).unwrap();
        assert!(del.len() < tokens.len());
        assert!(is_subsequence(&del, &tokens));
    }

    #[test]
    fn synonyms_come_from_brute_force_neighborhood() {
        let text = table(128, 8, 3);
        let tokens: Vec<u32> = vec![5, 17, 33, 64, 99, 100, 2, 77, 31, 8];
        let cfg = AttackConfig::new(AttackKind::Synonym, 0.5, 42);
        let out = apply_attack(&tokens, &cfg, &text).unwrap();
        assert_ne!(out, tokens);
        for (&src, &dst) in tokens.iter().zip(&out) {
            if src == dst {
                continue;
            }
            // brute force: rank every other token by cosine to the source
            let mut all: Vec<(f64, u32)> = (0..128u32)
                .filter(|&t| t != src)
                .map(|t| (cosine_similarity(text.row(src as usize), text.row(t as usize)).unwrap(), t))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let top: Vec<u32> = all[..5].iter().map(|p| p.1).collect();
            assert!(top.contains(&dst), "{dst} not among neighbors {top:?} of {src}");
        }
    }

    #[test]
    fn paraphrase_permutes_within_windows() {
        let text = table(64, 8, 4);
        let tokens: Vec<u32> = (0..23).collect();
        let out = apply_attack(&tokens, &AttackConfig::new(AttackKind::ParaphraseProxy, 0.0, 9), &text).unwrap();
        assert_ne!(out, tokens);
        for (a, b) in tokens.chunks(5).zip(out.chunks(5)) {
            let mut sorted = b.to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, a);
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let text = table(64, 8, 5);
        let tokens: Vec<u32> = (0..50).map(|i| i % 64).collect();
        let cfg = AttackConfig::new(AttackKind::ParaphraseProxy, 0.2, 77);
        assert_eq!(apply_attack(&tokens, &cfg, &text).unwrap(), apply_attack(&tokens, &cfg, &text).unwrap());
        assert!(matches!(
            apply_attack(&[], &AttackConfig::new(AttackKind::Delete, 0.1, 1), &text),
            Err(Error::EmptySequence)
        ));
        assert!(apply_attack(&[], &AttackConfig::new(AttackKind::Insert, 0.1, 1), &text).unwrap().is_empty());
        assert!(apply_attack(&tokens, &AttackConfig::new(AttackKind::Delete, 1.5, 1), &text).is_err());
        assert!(apply_attack(&[64], &AttackConfig::new(AttackKind::Delete, 0.1, 1), &text).is_err());
    }

    #[test]
    fn delete_length_matches_rate() {
        let text = table(64, 8, 6);
        let tokens: Vec<u32> = (0..200).map(|i| i % 64).collect();
        let rate = 0.1;
        let trials = 1000;
        let mean = (0..trials)
            .map(|s| {
                apply_attack(&tokens, &AttackConfig::new(AttackKind::Delete, rate, s), &text).unwrap().len() as f64
            })
            .sum::<f64>()
            / trials as f64;
        let expected = 200.0 * (1.0 - rate);
        let sd_of_mean = (200.0 * rate * (1.0 - rate) / trials as f64).sqrt();
        assert!((mean - expected).abs() <= 3.0 * sd_of_mean, "mean {mean}");
    }
}
