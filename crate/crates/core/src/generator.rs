//! Auto-regressive watermarked generation with per-step audit records.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::engine::Watermarker;
use crate::error::{Error, Result};
use crate::model_state::ModelSource;
use crate::numerics::{kl_divergence, softmax};
use crate::partition::{PartitionConfig, StepDiagnostics, WatermarkKey};
use crate::rng::{mix64, SplitMix64};
use crate::weights::WeightConfig;

pub const RECORD_FORMAT: &str = "AGMRECORD";
pub const RECORD_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// One uniform draw per token, inverted through the CDF in id order.
    #[default]
    Multinomial,
    /// Argmax, lowest id on ties.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_tokens: usize,
    pub sampling: Sampling,
    pub sampling_seed: u64,
    pub weight_config: WeightConfig,
    pub partition_config: PartitionConfig,
    pub watermark_enabled: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_tokens: 200,
            sampling: Sampling::Multinomial,
            sampling_seed: 42,
            weight_config: WeightConfig::default(),
            partition_config: PartitionConfig::default(),
            watermark_enabled: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be >= 1".into()));
        }
        self.weight_config.validate()?;
        self.partition_config.validate()
    }
}

/// Audit entry for one emitted token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: u32,
    /// Absent when watermarking is disabled.
    pub diagnostics: Option<StepDiagnostics>,
    /// Whether the token landed in the step's final green list.
    pub in_green: Option<bool>,
    /// `KL(watermarked || unbiased)` at this step; zero when disabled.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub tokens: Vec<u32>,
    pub per_step: Vec<StepRecord>,
    pub config_snapshot: GenerationConfig,
    pub model_fingerprint: u64,
    pub sequence_index: u64,
    /// The model source ran out before `max_tokens`.
    pub truncated: bool,
}

impl GenerationRecord {
    /// Tokens found in their step's final green list.
    pub fn green_count(&self) -> usize {
        self.per_step.iter().filter(|s| s.in_green == Some(true)).count()
    }

    pub fn mean_kl(&self) -> f64 {
        if self.per_step.is_empty() {
            0.0
        } else {
            self.per_step.iter().map(|s| s.kl).sum::<f64>() / self.per_step.len() as f64
        }
    }

    pub fn mean_swapped(&self) -> f64 {
        let swaps: Vec<f64> = self.per_step.iter().filter_map(|s| s.diagnostics.map(|d| d.swapped as f64)).collect();
        if swaps.is_empty() {
            0.0
        } else {
            swaps.iter().sum::<f64>() / swaps.len() as f64
        }
    }
}

/// Inverse-CDF draw: the first id whose cumulative probability exceeds `u`.
pub fn sample_inverse_cdf(probs: &[f64], u: f64) -> u32 {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum {
            return i as u32;
        }
    }
    last_positive as u32
}

pub fn argmax(probs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as u32
}

/// Seed of the sampling stream for sequence `index`.
pub fn stream_seed(sampling_seed: u64, index: u64) -> u64 {
    mix64(sampling_seed ^ index)
}

/// A model source bound to a key and configuration, ready to generate.
pub struct Generator<'a, S: ModelSource + ?Sized> {
    source: &'a S,
    watermarker: Watermarker,
    config: GenerationConfig,
}

impl<'a, S: ModelSource + ?Sized> Generator<'a, S> {
    pub fn new(source: &'a S, key: WatermarkKey, config: GenerationConfig) -> Result<Self> {
        config.validate()?;
        let watermarker = Watermarker::new(source, key, config.weight_config.clone(), config.partition_config.clone())?;
        Ok(Self { source, watermarker, config })
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    pub fn watermarker(&self) -> &Watermarker {
        &self.watermarker
    }

    /// Generates sequence number `index` of this configuration.
    pub fn run(&self, index: u64) -> Result<GenerationRecord> {
        let cfg = &self.config;
        let text = self.source.text_embeddings();
        let mut rng = SplitMix64::new(stream_seed(cfg.sampling_seed, index));
        let mut tokens: Vec<u32> = Vec::with_capacity(cfg.max_tokens);
        let mut per_step = Vec::with_capacity(cfg.max_tokens);
        let mut truncated = false;

        for _ in 0..cfg.max_tokens {
            let Some(state) = self.source.step(&tokens)? else {
                truncated = true;
                break;
            };
            let logits = state.logits.to_f64();
            let (dist, diagnostics, plan) = if cfg.watermark_enabled {
                let plan = self.watermarker.plan(&state, text, tokens.last().copied())?;
                let biased = plan.biased(&logits, cfg.partition_config.delta)?;
                (biased, Some(plan.diagnostics), Some(plan))
            } else {
                (softmax(&logits)?, None, None)
            };
            let token = match cfg.sampling {
                Sampling::Multinomial => sample_inverse_cdf(&dist, rng.next_f64()),
                Sampling::Greedy => argmax(&dist),
            };
            let (in_green, kl) = match &plan {
                Some(plan) => (Some(plan.partition.is_green(token)), kl_divergence(&dist, &plan.probs)?),
                None => (None, 0.0),
            };
            tokens.push(token);
            per_step.push(StepRecord { token, diagnostics, in_green, kl });
        }

        Ok(GenerationRecord {
            tokens,
            per_step,
            config_snapshot: cfg.clone(),
            model_fingerprint: self.source.fingerprint(),
            sequence_index: index,
            truncated,
        })
    }
}

/// Generates sequence 0.
pub fn generate<S: ModelSource + ?Sized>(
    source: &S,
    key: WatermarkKey,
    config: &GenerationConfig,
) -> Result<GenerationRecord> {
    Generator::new(source, key, config.clone())?.run(0)
}

/// Regenerates under the record's own configuration and compares tokens.
pub fn replay_verify<S: ModelSource + ?Sized>(
    record: &GenerationRecord,
    source: &S,
    key: WatermarkKey,
) -> Result<bool> {
    let found = source.fingerprint();
    if found != record.model_fingerprint {
        return Err(Error::FingerprintMismatch { expected: record.model_fingerprint, found });
    }
    let replayed = Generator::new(source, key, record.config_snapshot.clone())?.run(record.sequence_index)?;
    Ok(replayed.tokens == record.tokens && replayed.truncated == record.truncated)
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    format: String,
    version: u64,
    model_fingerprint: String,
    sequence_index: u64,
    truncated: bool,
    steps: usize,
    config: GenerationConfig,
}

/// Writes a record as JSON lines: a header with the configuration, then one
/// [`StepRecord`] per token.
pub fn record_to_writer<W: Write>(record: &GenerationRecord, mut out: W) -> Result<()> {
    let header = RecordHeader {
        format: RECORD_FORMAT.into(),
        version: RECORD_VERSION,
        model_fingerprint: format!("{:016x}", record.model_fingerprint),
        sequence_index: record.sequence_index,
        truncated: record.truncated,
        steps: record.per_step.len(),
        config: record.config_snapshot.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for step in &record.per_step {
        serde_json::to_writer(&mut out, step)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn record_from_reader<R: BufRead>(reader: R) -> Result<GenerationRecord> {
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or(Error::EmptySequence)??;
    let header: RecordHeader = serde_json::from_str(&header_line)?;
    if header.format != RECORD_FORMAT || header.version != RECORD_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported record format {:?} version {}",
            header.format, header.version
        )));
    }
    let model_fingerprint = u64::from_str_radix(&header.model_fingerprint, 16)
        .map_err(|e| Error::InvalidConfig(format!("bad model fingerprint: {e}")))?;
    let mut per_step = Vec::with_capacity(header.steps);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        per_step.push(serde_json::from_str::<StepRecord>(&line)?);
    }
    if per_step.len() != header.steps {
        return Err(Error::Dimension(format!("header announces {} steps, found {}", header.steps, per_step.len())));
    }
    Ok(GenerationRecord {
        tokens: per_step.iter().map(|s| s.token).collect(),
        per_step,
        config_snapshot: header.config,
        model_fingerprint,
        sequence_index: header.sequence_index,
        truncated: header.truncated,
    })
}
