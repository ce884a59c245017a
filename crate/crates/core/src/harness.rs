//! Experiment orchestration: configuration files, paired watermarked and
//! unwatermarked runs, detection scoring, attack sweeps and ablations.
//!
//! Sequence `i` of the watermarked arm uses sampling stream `i` and sequence
//! `i` of the unwatermarked arm uses stream `N + i`. Work fans out over rayon
//! but every reduction runs in sequence-index order, so a report depends only
//! on its configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack, AttackConfig, AttackKind};
use crate::detector::{count_green, roc_auc, z_statistic, DetectionMode, ReplayContext, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::generator::{stream_seed, GenerationConfig, GenerationRecord, Generator, Sampling};
use crate::model_state::{read_trace, ModelSource, ModelSpec, ToyModel, ToyModelConfig};
use crate::partition::{PartitionAblation, PartitionConfig, WatermarkKey};
use crate::weights::{WeightAblation, WeightConfig};

/// One row of an ablation table: a single switch applied to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoAttention,
    NoVision,
    NoContext,
    NoEntropy,
    NoDensity,
    FixedScale,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoAttention,
        Variant::NoVision,
        Variant::NoContext,
        Variant::NoEntropy,
        Variant::NoDensity,
        Variant::FixedScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAttention => "no-attention",
            Self::NoVision => "no-vision",
            Self::NoContext => "no-context",
            Self::NoEntropy => "no-entropy",
            Self::NoDensity => "no-density",
            Self::FixedScale => "fixed-scale",
        }
    }

    /// Writes this variant's switches into `config`, including the fusion
    /// weight the ablation implies.
    pub fn apply(self, weights: &mut WeightConfig, partition: &mut PartitionConfig) {
        weights.ablation = WeightAblation::Full;
        partition.ablation = PartitionAblation::Full;
        match self {
            Self::Full => {}
            Self::NoAttention => weights.ablation = WeightAblation::NoAttention,
            Self::NoVision => {
                weights.ablation = WeightAblation::NoVision;
                weights.omega = 0.0;
            }
            Self::NoContext => {
                weights.ablation = WeightAblation::NoContext;
                weights.omega = 1.0;
            }
            Self::NoEntropy => partition.ablation = PartitionAblation::NoEntropy,
            Self::NoDensity => partition.ablation = PartitionAblation::NoDensity,
            Self::FixedScale => partition.ablation = PartitionAblation::FixedScale,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An attack and its rate, written `kind:rate` in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub rate: f64,
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rate) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("attack {s:?} is not of the form kind:rate")))?;
        let kind: AttackKind = kind.trim().parse()?;
        let rate: f64 =
            rate.trim().parse().map_err(|_| Error::InvalidConfig(format!("attack {s:?} has a non-numeric rate")))?;
        let spec = Self { kind, rate };
        AttackConfig::new(kind, rate, 0).validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for AttackSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttackSpec> for String {
    fn from(a: AttackSpec) -> String {
        format!("{}:{}", a.kind.name(), a.rate)
    }
}

/// Every attack kind at rates 0.05, 0.1 and 0.2.
pub fn default_attack_sweep() -> Vec<AttackSpec> {
    let kinds = [AttackKind::Insert, AttackKind::Delete, AttackKind::Synonym, AttackKind::ParaphraseProxy];
    kinds.into_iter().flat_map(|kind| [0.05, 0.1, 0.2].map(|rate| AttackSpec { kind, rate })).collect()
}

/// Flat experiment description. Keys mirror the CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Recorded trace to run against instead of the toy model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    pub toy_seed: u64,
    pub vocab: usize,
    pub dim: usize,
    pub nvision: usize,
    pub context_window: usize,
    pub entropy_cycle: usize,
    pub temperature_low: f64,
    pub temperature_high: f64,

    /// Hex watermark key.
    pub key: String,
    pub delta: f64,
    pub gamma: f64,
    pub omega: f64,
    pub alpha: f64,
    pub tau: f64,
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    pub max_tokens: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub variant: Variant,

    pub mode: DetectionMode,
    pub threshold: f64,
    pub attacks: Vec<AttackSpec>,
    pub attack_seed: u64,
    /// Sequences per arm.
    pub sequences: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let toy = ToyModelConfig::default();
        let gen = GenerationConfig::default();
        Self {
            trace: None,
            toy_seed: toy.seed,
            vocab: toy.spec.vocab_size,
            dim: toy.spec.embed_dim,
            nvision: toy.spec.n_vision,
            context_window: toy.context_window,
            entropy_cycle: toy.entropy_cycle,
            temperature_low: toy.temperature_low,
            temperature_high: toy.temperature_high,
            key: WatermarkKey(42).to_hex(),
            delta: gen.partition_config.delta,
            gamma: gen.partition_config.gamma,
            omega: gen.weight_config.omega,
            alpha: gen.partition_config.alpha,
            tau: gen.partition_config.tau,
            margin: gen.partition_config.margin,
            cap: gen.partition_config.swap_cap,
            max_tokens: gen.max_tokens,
            sampling: gen.sampling,
            seed: gen.sampling_seed,
            variant: Variant::Full,
            mode: DetectionMode::Replay,
            threshold: DEFAULT_THRESHOLD,
            attacks: default_attack_sweep(),
            attack_seed: 7,
            sequences: 200,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a configuration file. `origin` names the file in errors.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|span| {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}: ")
                })
                .unwrap_or_default();
            Error::Config { path: origin.to_string(), message: format!("{location}{}", e.message()) }
        })?;
        config.validate().map_err(|e| Error::Config { path: origin.to_string(), message: e.to_string() })?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml_str(&text, &path.display().to_string())?;
        // Relative trace paths are resolved against the config file.
        if let (Some(trace), Some(dir)) = (config.trace.as_mut(), path.parent()) {
            if trace.is_relative() {
                *trace = dir.join(&*trace);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::InvalidConfig("sequences must be >= 1".into()));
        }
        if !(self.threshold.is_finite()) {
            return Err(Error::InvalidConfig("threshold must be finite".into()));
        }
        self.watermark_key()?;
        self.generation_config().validate()?;
        if self.trace.is_none() {
            self.toy_config().validate()?;
        }
        Ok(())
    }

    pub fn watermark_key(&self) -> Result<WatermarkKey> {
        WatermarkKey::from_hex(&self.key)
    }

    pub fn toy_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            spec: ModelSpec { vocab_size: self.vocab, embed_dim: self.dim, n_vision: self.nvision },
            seed: self.toy_seed,
            context_window: self.context_window,
            entropy_cycle: self.entropy_cycle,
            temperature_low: self.temperature_low,
            temperature_high: self.temperature_high,
        }
    }

    /// Effective generation settings for the watermarked arm.
    pub fn generation_config(&self) -> GenerationConfig {
        let mut weight_config = WeightConfig { omega: self.omega, ..WeightConfig::default() };
        let mut partition_config = PartitionConfig {
            gamma: self.gamma,
            delta: self.delta,
            alpha: self.alpha,
            tau: self.tau,
            margin: self.margin,
            swap_cap: self.cap,
            ablation: PartitionAblation::Full,
        };
        self.variant.apply(&mut weight_config, &mut partition_config);
        GenerationConfig {
            max_tokens: self.max_tokens,
            sampling: self.sampling,
            sampling_seed: self.seed,
            weight_config,
            partition_config,
            watermark_enabled: true,
        }
    }

    /// Loads the configured trace or builds the toy model.
    pub fn load_source(&self) -> Result<Box<dyn ModelSource>> {
        match &self.trace {
            Some(path) => Ok(Box::new(read_trace(path)?)),
            None => Ok(Box::new(ToyModel::new(self.toy_config())?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub kind: AttackKind,
    pub rate: f64,
    pub auc: f64,
    /// Unattacked AUC minus attacked AUC.
    pub auc_drop: f64,
    pub accuracy: f64,
    pub mean_z_watermarked: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub mode: DetectionMode,
    pub sequences: usize,
    pub threshold: f64,
    pub auc: f64,
    /// `(TP + TN) / 2N` at the threshold.
    pub accuracy: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    pub mean_z_watermarked: f64,
    pub mean_z_unwatermarked: f64,
    pub max_z_unwatermarked: f64,
    /// AUC of the same sequences scored against the base partition only.
    pub key_only_auc: f64,
    /// Mean per-step KL(watermarked || original) over the watermarked arm.
    pub mean_kl: f64,
    pub mean_swaps: f64,
    pub mean_critical_fraction: f64,
    pub attacks: Vec<AttackRow>,
    pub config: GenerationConfig,
}

/// Detection scores of one arm.
#[derive(Debug, Clone, PartialEq)]
struct ArmScores {
    z: Vec<f64>,
    key_only_z: Vec<f64>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn accuracy(positive: &[f64], negative: &[f64], threshold: f64) -> f64 {
    let tp = positive.iter().filter(|&&z| z > threshold).count();
    let tn = negative.iter().filter(|&&z| z <= threshold).count();
    (tp + tn) as f64 / (positive.len() + negative.len()) as f64
}

fn rate_above(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|&&z| z > threshold).count() as f64 / scores.len() as f64
}

struct Scorer<'a> {
    key: WatermarkKey,
    mode: DetectionMode,
    gamma: f64,
    vocab_size: usize,
    horizon: Option<usize>,
    replay: ReplayContext<'a>,
}

impl Scorer<'_> {
    /// z-score of a sequence; an empty sequence scores zero. Sequences longer
    /// than a bounded source are scored on the covered prefix.
    fn score(&self, tokens: &[u32], mode: DetectionMode) -> Result<f64> {
        let tokens = match self.horizon {
            Some(h) => &tokens[..tokens.len().min(h)],
            None => tokens,
        };
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let (g, t) = count_green(tokens, self.key, mode, self.gamma, self.vocab_size, Some(&self.replay))?;
        Ok(z_statistic(g, t, self.gamma))
    }

    fn score_arm(&self, sequences: &[Vec<u32>]) -> Result<ArmScores> {
        let pairs = sequences
            .par_iter()
            .map(|tokens| {
                let z = self.score(tokens, self.mode)?;
                let k =
                    if self.mode == DetectionMode::KeyOnly { z } else { self.score(tokens, DetectionMode::KeyOnly)? };
                Ok((z, k))
            })
            .collect::<Result<Vec<_>>>()?;
        let (z, key_only_z) = pairs.into_iter().unzip();
        Ok(ArmScores { z, key_only_z })
    }
}

fn generate_arm<S: ModelSource + ?Sized>(
    generator: &Generator<'_, S>,
    indices: std::ops::Range<u64>,
) -> Result<Vec<GenerationRecord>> {
    indices.into_par_iter().map(|i| generator.run(i)).collect()
}

/// Runs one experiment against an already loaded source.
pub fn run_eval_with_source(config: &ExperimentConfig, source: &dyn ModelSource) -> Result<EvalReport> {
    config.validate()?;
    let key = config.watermark_key()?;
    let gen_config = config.generation_config();
    let n = config.sequences as u64;

    let watermarked_gen = Generator::new(source, key, gen_config.clone())?;
    let null_gen = Generator::new(source, key, GenerationConfig { watermark_enabled: false, ..gen_config.clone() })?;
    let watermarked = generate_arm(&watermarked_gen, 0..n)?;
    let unwatermarked = generate_arm(&null_gen, n..2 * n)?;

    let scorer = Scorer {
        key,
        mode: config.mode,
        gamma: gen_config.partition_config.gamma,
        vocab_size: source.spec().vocab_size,
        horizon: source.horizon(),
        replay: ReplayContext::from_watermarker(source, watermarked_gen.watermarker().clone()),
    };
    let pos_tokens: Vec<Vec<u32>> = watermarked.iter().map(|r| r.tokens.clone()).collect();
    let neg_tokens: Vec<Vec<u32>> = unwatermarked.iter().map(|r| r.tokens.clone()).collect();
    let pos = scorer.score_arm(&pos_tokens)?;
    let neg = scorer.score_arm(&neg_tokens)?;
    let auc = roc_auc(&pos.z, &neg.z)?;

    let mut kl_sum = 0.0;
    let mut swap_sum = 0.0;
    let mut critical_sum = 0.0;
    let mut steps = 0usize;
    let vocab = source.spec().vocab_size as f64;
    for record in &watermarked {
        for step in &record.per_step {
            kl_sum += step.kl;
            if let Some(d) = &step.diagnostics {
                swap_sum += d.swapped as f64;
                critical_sum += d.critical_size as f64 / vocab;
            }
            steps += 1;
        }
    }
    let per_step = |sum: f64| if steps == 0 { 0.0 } else { sum / steps as f64 };

    let mut attacks = Vec::with_capacity(config.attacks.len());
    let text = source.text_embeddings();
    for spec in &config.attacks {
        let attacked = pos_tokens
            .par_iter()
            .enumerate()
            .map(|(i, tokens)| {
                let attack = AttackConfig::new(spec.kind, spec.rate, stream_seed(config.attack_seed, i as u64));
                apply_attack(tokens, &attack, text)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = attacked.par_iter().map(|tokens| scorer.score(tokens, config.mode)).collect::<Result<Vec<_>>>()?;
        let attacked_auc = roc_auc(&scores, &neg.z)?;
        let lengths: Vec<f64> = attacked.iter().map(|t| t.len() as f64).collect();
        attacks.push(AttackRow {
            kind: spec.kind,
            rate: spec.rate,
            auc: attacked_auc,
            auc_drop: auc - attacked_auc,
            accuracy: accuracy(&scores, &neg.z, config.threshold),
            mean_z_watermarked: mean(&scores),
            mean_length: mean(&lengths),
        });
    }

    Ok(EvalReport {
        variant: config.variant,
        mode: config.mode,
        sequences: config.sequences,
        threshold: config.threshold,
        auc,
        accuracy: accuracy(&pos.z, &neg.z, config.threshold),
        true_positive_rate: rate_above(&pos.z, config.threshold),
        false_positive_rate: rate_above(&neg.z, config.threshold),
        mean_z_watermarked: mean(&pos.z),
        mean_z_unwatermarked: mean(&neg.z),
        max_z_unwatermarked: neg.z.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        key_only_auc: roc_auc(&pos.key_only_z, &neg.key_only_z)?,
        mean_kl: per_step(kl_sum),
        mean_swaps: per_step(swap_sum),
        mean_critical_fraction: per_step(critical_sum),
        attacks,
        config: gen_config,
    })
}

/// Generates both arms, scores them, and re-scores the watermarked arm under
/// every configured attack.
pub fn run_eval(config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    let source = config.load_source()?;
    run_eval_with_source(config, source.as_ref())
}

/// One evaluation per variant, everything else held fixed. Variant names are
/// checked before any work starts.
pub fn run_ablation<S: AsRef<str>>(config: &ExperimentConfig, variants: &[S]) -> Result<Vec<EvalReport>> {
    let variants = variants.iter().map(|v| v.as_ref().parse::<Variant>()).collect::<Result<Vec<_>>>()?;
    config.validate()?;
    let source = config.load_source()?;
    variants
        .into_iter()
        .map(|variant| {
            let config = ExperimentConfig { variant, ..config.clone() };
            run_eval_with_source(&config, source.as_ref())
        })
        .collect()
}

/// Plain-text summary, one row per report followed by each report's attack
/// rows.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<13} {:>8} {:>7} {:>7} {:>8} {:>8} {:>7} {:>8} {:>8} {:>7}",
        "variant", "mode", "auc", "acc", "z_wm", "z_null", "fpr", "auc_key", "kl", "swaps"
    );
    for r in reports {
        let mode = match r.mode {
            DetectionMode::KeyOnly => "key-only",
            DetectionMode::Replay => "replay",
        };
        let _ = writeln!(
            out,
            "{:<13} {:>8} {:>7.4} {:>7.4} {:>8.3} {:>8.3} {:>7.4} {:>8.4} {:>8.5} {:>7.2}",
            r.variant.name(),
            mode,
            r.auc,
            r.accuracy,
            r.mean_z_watermarked,
            r.mean_z_unwatermarked,
            r.false_positive_rate,
            r.key_only_auc,
            r.mean_kl,
            r.mean_swaps
        );
    }
    for r in reports.iter().filter(|r| !r.attacks.is_empty()) {
        let _ = writeln!(out);
        let _ = writeln!(out, "attacks ({})", r.variant.name());
        let _ = writeln!(
            out,
            "{:<11} {:>6} {:>7} {:>8} {:>7} {:>8} {:>7}",
            "kind", "rate", "auc", "drop", "acc", "z_wm", "len"
        );
        for a in &r.attacks {
            let _ = writeln!(
                out,
                "{:<11} {:>6.3} {:>7.4} {:>8.4} {:>7.4} {:>8.3} {:>7.1}",
                a.kind.name(),
                a.rate,
                a.auc,
                a.auc_drop,
                a.accuracy,
                a.mean_z_watermarked,
                a.mean_length
            );
        }
    }
    out
}
