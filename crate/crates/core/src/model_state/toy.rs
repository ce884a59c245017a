use serde::{Deserialize, Serialize};

use super::{ModelSource, ModelSpec, StepState};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, softmax, RealMatrix, RealVector, NORM_FLOOR};
use crate::rng::{fingerprint, SplitMix64};

/// Parameters of the synthetic vision-language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub spec: ModelSpec,
    pub seed: u64,
    /// Number of trailing prefix tokens mixed into the hidden state.
    pub context_window: usize,
    /// Steps spent in each temperature regime before switching.
    pub entropy_cycle: usize,
    pub temperature_low: f64,
    pub temperature_high: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            spec: ModelSpec { vocab_size: 4096, embed_dim: 32, n_vision: 8 },
            seed: 42,
            context_window: 4,
            entropy_cycle: 4,
            temperature_low: 0.15,
            temperature_high: 1.0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.context_window == 0 || self.entropy_cycle == 0 {
            return Err(Error::InvalidConfig("context_window and entropy_cycle must be >= 1".into()));
        }
        let t_ok = |t: f64| t.is_finite() && t > 0.0;
        if !t_ok(self.temperature_low) || !t_ok(self.temperature_high) {
            return Err(Error::InvalidConfig("temperatures must be positive".into()));
        }
        if self.temperature_low >= self.temperature_high {
            return Err(Error::InvalidConfig(format!(
                "temperature_low ({}) must be below temperature_high ({})",
                self.temperature_low, self.temperature_high
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint([
            0x544f_595f_4d4f_4445, // "TOY_MODE"
            self.seed,
            self.spec.vocab_size as u64,
            self.spec.embed_dim as u64,
            self.spec.n_vision as u64,
            self.context_window as u64,
            self.entropy_cycle as u64,
            self.temperature_low.to_bits(),
            self.temperature_high.to_bits(),
        ])
    }
}

/// A transparent stand-in for a vision-language decoder.
///
/// Embeddings are seeded pseudo-normals drawn in the order text table, vision
/// table, start vector. A step with prefix `y` works as follows:
///
/// 1. `q` is the mean embedding of the last `context_window` tokens of `y`
///    (the start vector when `y` is empty).
/// 2. Vision attention is `softmax(E_v · q' / sqrt(d))` where `q'` is `q`
///    rescaled to norm `sqrt(d)`, the typical norm of an embedding row.
/// 3. The hidden state is the unit vector along `q + sum_j a_j E_v[j]`.
/// 4. Logits are `E_t · hidden / T`, where `T` is `temperature_high` for steps
///    in even blocks of `entropy_cycle` and `temperature_low` in odd blocks.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    text: RealMatrix,
    vision: RealMatrix,
    start: Vec<f64>,
    fingerprint: u64,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelSpec { vocab_size, embed_dim, n_vision } = config.spec;
        let mut rng = SplitMix64::new(config.seed);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.next_normal() as f32).collect() };
        let text = RealMatrix::new(vocab_size, embed_dim, draw(vocab_size * embed_dim))?;
        let vision = RealMatrix::new(n_vision, embed_dim, draw(n_vision * embed_dim))?;
        let start = draw(embed_dim).into_iter().map(f64::from).collect();
        let fingerprint = config.fingerprint();
        Ok(Self { config, text, vision, start, fingerprint })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Temperature applied at step index `t` (the prefix length).
    pub fn temperature_at(&self, t: usize) -> f64 {
        if (t / self.config.entropy_cycle).is_multiple_of(2) {
            self.config.temperature_high
        } else {
            self.config.temperature_low
        }
    }

    fn query(&self, prefix: &[u32]) -> Vec<f64> {
        let d = self.config.spec.embed_dim;
        let window = &prefix[prefix.len().saturating_sub(self.config.context_window)..];
        if window.is_empty() {
            return self.start.clone();
        }
        let mut q = vec![0.0; d];
        for &tok in window {
            for (acc, &v) in q.iter_mut().zip(self.text.row(tok as usize)) {
                *acc += f64::from(v);
            }
        }
        let n = window.len() as f64;
        q.iter_mut().for_each(|v| *v /= n);
        q
    }

    pub fn step_state(&self, prefix: &[u32]) -> Result<StepState> {
        let spec = &self.config.spec;
        for &tok in prefix {
            spec.check_token(tok)?;
        }
        let d = spec.embed_dim;
        let sqrt_d = (d as f64).sqrt();

        let query = self.query(prefix);
        let qnorm = l2_norm(&query);
        let scaled: Vec<f64> =
            if qnorm < NORM_FLOOR { vec![0.0; d] } else { query.iter().map(|v| v * sqrt_d / qnorm).collect() };
        let scores: Vec<f64> = self.vision.iter_rows().map(|row| dot(row, &scaled) / sqrt_d).collect();
        let attention = softmax(&scores)?;

        let mut hidden = query;
        for (a, row) in attention.iter().zip(self.vision.iter_rows()) {
            for (h, &v) in hidden.iter_mut().zip(row) {
                *h += a * f64::from(v);
            }
        }
        let hnorm = l2_norm(&hidden);
        if hnorm >= NORM_FLOOR {
            hidden.iter_mut().for_each(|v| *v /= hnorm);
        }

        let temperature = self.temperature_at(prefix.len());
        let logits: Vec<f64> = self.text.iter_rows().map(|row| dot(row, &hidden) / temperature).collect();

        Ok(StepState {
            logits: RealVector::from_f64(&logits)?,
            vision_attention: RealVector::from_f64(&attention)?,
            hidden: RealVector::from_f64(&hidden)?,
        })
    }
}

impl ModelSource for ToyModel {
    fn spec(&self) -> ModelSpec {
        self.config.spec
    }

    fn text_embeddings(&self) -> &RealMatrix {
        &self.text
    }

    fn vision_embeddings(&self) -> &RealMatrix {
        &self.vision
    }

    fn step(&self, prefix: &[u32]) -> Result<Option<StepState>> {
        self.step_state(prefix).map(Some)
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normalized_entropy;

    fn small() -> ToyModelConfig {
        ToyModelConfig { spec: ModelSpec { vocab_size: 64, embed_dim: 8, n_vision: 4 }, ..ToyModelConfig::default() }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ToyModel::new(small()).unwrap();
        let b = ToyModel::new(small()).unwrap();
        let bits = |m: &ToyModel| m.text.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.text.values().len(), 512);

        let c = ToyModel::new(ToyModelConfig { seed: 2, ..small() }).unwrap();
        let d = ToyModel::new(ToyModelConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(c.text.values(), d.text.values());
    }

    #[test]
    fn empty_prefix_shapes() {
        let model = ToyModel::new(small()).unwrap();
        let state = model.step_state(&[]).unwrap();
        state.validate(&model.spec()).unwrap();
        assert_eq!(state, model.step_state(&[]).unwrap());
    }

    #[test]
    fn same_prefix_same_state() {
        let model = ToyModel::new(small()).unwrap();
        let prefix = [3, 9, 27, 63, 1];
        assert_eq!(model.step_state(&prefix).unwrap(), model.step_state(&prefix).unwrap());
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let model = ToyModel::new(small()).unwrap();
        assert!(matches!(model.step_state(&[1, 64]), Err(Error::TokenOutOfRange { token: 64, vocab_size: 64 })));
    }

    #[test]
    fn low_temperature_has_lower_entropy() {
        let model = ToyModel::new(ToyModelConfig::default()).unwrap();
        let cycle = model.config().entropy_cycle;
        let prefix: Vec<u32> = (0..cycle as u32).map(|t| t * 17).collect();
        let high = model.step_state(&prefix[..0]).unwrap();
        let low = model.step_state(&prefix).unwrap();
        assert!(model.temperature_at(0) > model.temperature_at(cycle));
        let h = |s: &StepState| normalized_entropy(&softmax(&s.logits.to_f64()).unwrap()).unwrap();
        assert!(h(&low) < h(&high), "low {} high {}", h(&low), h(&high));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ToyModelConfig { temperature_low: 2.0, ..small() };
        assert!(ToyModel::new(cfg).is_err());
        let cfg = ToyModelConfig { spec: ModelSpec { vocab_size: 1, embed_dim: 8, n_vision: 4 }, ..small() };
        assert!(matches!(ToyModel::new(cfg), Err(Error::InvalidSpec(_))));
    }
}
