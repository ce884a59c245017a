//! One watermarking step: from a [`StepState`] and the previous token to the
//! final partition and the biased next-token distribution.

use std::sync::Arc;

use crate::error::Result;
use crate::model_state::{ModelSource, ModelSpec, StepState};
use crate::numerics::{normalized_entropy, softmax, RealMatrix};
use crate::partition::{
    base_partition, critical_ratio, critical_set, swap_partition, watermark_distribution, weight_density, Partition,
    PartitionConfig, StepDiagnostics, SwapReport, WatermarkKey,
};
use crate::weights::{CriticalWeights, EmbeddingIndex, WeightConfig};

/// Everything computed for one step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    /// Unbiased next-token distribution.
    pub probs: Vec<f64>,
    pub weights: CriticalWeights,
    pub base: Partition,
    /// Partition after the critical swap.
    pub partition: Partition,
    pub swap: SwapReport,
    pub diagnostics: StepDiagnostics,
}

impl StepPlan {
    /// Watermarked distribution for bias `delta`.
    pub fn biased(&self, logits: &[f64], delta: f64) -> Result<Vec<f64>> {
        watermark_distribution(logits, &self.partition, delta)
    }
}

/// Holds the per-model precomputation and the watermark settings.
#[derive(Debug, Clone)]
pub struct Watermarker {
    spec: ModelSpec,
    key: WatermarkKey,
    weight_config: WeightConfig,
    partition_config: PartitionConfig,
    index: Arc<EmbeddingIndex>,
}

impl Watermarker {
    pub fn new<S: ModelSource + ?Sized>(
        source: &S,
        key: WatermarkKey,
        weight_config: WeightConfig,
        partition_config: PartitionConfig,
    ) -> Result<Self> {
        weight_config.validate()?;
        partition_config.validate()?;
        let spec = source.spec();
        spec.validate()?;
        let index = Arc::new(EmbeddingIndex::new(source.text_embeddings(), source.vision_embeddings())?);
        Ok(Self { spec, key, weight_config, partition_config, index })
    }

    /// Same model and settings under another key; shares the precomputation.
    pub fn rekeyed(&self, key: WatermarkKey) -> Self {
        Self { key, ..self.clone() }
    }

    pub fn key(&self) -> WatermarkKey {
        self.key
    }

    pub fn partition_config(&self) -> &PartitionConfig {
        &self.partition_config
    }

    pub fn weight_config(&self) -> &WeightConfig {
        &self.weight_config
    }

    /// Runs weighting, entropy, density, ratio, base split and swap.
    ///
    /// `prev_token` is `None` at the first position.
    pub fn plan(&self, state: &StepState, text: &RealMatrix, prev_token: Option<u32>) -> Result<StepPlan> {
        state.validate(&self.spec)?;
        let logits = state.logits.to_f64();
        let probs = softmax(&logits)?;
        let h_norm = normalized_entropy(&probs)?;

        let weights = self.index.critical_weights(state, text, &self.weight_config)?;
        let (_, rho) = weight_density(&weights, self.partition_config.tau);
        let eta = critical_ratio(h_norm, rho, &self.partition_config);
        let critical = critical_set(&weights, eta);

        let prev = match prev_token {
            Some(t) => {
                self.spec.check_token(t)?;
                t
            }
            None => self.spec.sentinel_token(),
        };
        let base = base_partition(self.key, prev, self.partition_config.gamma, self.spec.vocab_size)?;
        let (partition, swap) = swap_partition(&base, critical, &weights, &self.partition_config)?;

        let diagnostics = StepDiagnostics { h_norm, rho, eta, swapped: swap.swapped, critical_size: critical.len() };
        Ok(StepPlan { probs, weights, base, partition, swap, diagnostics })
    }
}
