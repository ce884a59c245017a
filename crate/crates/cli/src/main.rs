use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use agmark::attacks::{apply_attack, AttackConfig, AttackKind};
use agmark::detector::{detect, DetectionMode, ReplayContext, DEFAULT_THRESHOLD};
use agmark::generator::{
    record_from_reader, record_to_writer, GenerationConfig, GenerationRecord, Generator, Sampling,
};
use agmark::harness::{render_table, run_ablation, run_eval, ExperimentConfig};
use agmark::model_state::{read_trace, write_trace, ModelSource, ModelSpec, ToyModel, ToyModelConfig, Trace};
use agmark::partition::{PartitionConfig, WatermarkKey};
use agmark::weights::WeightConfig;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "agmark", version, about = "Attention-guided watermarking for vision-language decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a watermarked sequence and write its audit record.
    Generate(GenerateArgs),
    /// Score a token sequence for the watermark.
    Detect(DetectArgs),
    /// Apply a token-level removal attack to a sequence.
    Attack(AttackArgs),
    /// Run an experiment described by a config file.
    Eval(EvalArgs),
    /// Roll out the toy model and save the states as a trace file.
    TraceGen(TraceGenArgs),
}

/// Where model states come from. Without `--trace`, the toy model is used.
#[derive(Args, Clone)]
struct SourceArgs {
    /// Recorded trace file.
    #[arg(long, conflicts_with = "toy_seed")]
    trace: Option<PathBuf>,
    /// Toy model seed.
    #[arg(long)]
    toy_seed: Option<u64>,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    nvision: usize,
}

impl SourceArgs {
    fn toy_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            spec: ModelSpec { vocab_size: self.vocab, embed_dim: self.dim, n_vision: self.nvision },
            seed: self.toy_seed.unwrap_or(ToyModelConfig::default().seed),
            ..ToyModelConfig::default()
        }
    }

    fn load(&self) -> Result<Box<dyn ModelSource>> {
        Ok(match &self.trace {
            Some(path) => Box::new(read_trace(path).with_context(|| format!("reading trace {}", path.display()))?),
            None => Box::new(ToyModel::new(self.toy_config())?),
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Greedy,
    Multinomial,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Watermark key in hex.
    #[arg(long, default_value = "2a")]
    key: String,
    #[arg(long, default_value_t = 4.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    omega: f64,
    #[arg(long, default_value_t = 0.27)]
    alpha: f64,
    #[arg(long, default_value_t = 0.98)]
    tau: f64,
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    /// Maximum swaps per step (unbounded when omitted).
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long, default_value_t = 200)]
    max_tokens: usize,
    #[arg(long, value_enum, default_value_t = SamplingArg::Multinomial)]
    sampling: SamplingArg,
    /// Sampling seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Record output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// JSON array of token ids, or a generation record.
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long, default_value = "2a")]
    key: String,
    /// `replay` needs a model source; defaults to replay when one is given.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<DetectionMode>,
    #[command(flatten)]
    source: SourceArgs,
    /// Overrides the record's gamma (default 0.5 for bare token arrays).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    kind: AttackKind,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    neighbor_k: usize,
    /// Embeddings for synonym neighbors come from this source.
    #[command(flatten)]
    source: SourceArgs,
    /// Output path for the attacked JSON array (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// JSON report path; falls back to `out` in the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated ablation variants to run instead of the configured one.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct TraceGenArgs {
    #[arg(long, default_value_t = 42)]
    toy_seed: u64,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    nvision: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<DetectionMode, String> {
    s.parse().map_err(|e: agmark::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    s.parse().map_err(|e: agmark::Error| e.to_string())
}

/// Bare JSON token array, or a full generation record.
enum TokenInput {
    Tokens(Vec<u32>),
    Record(GenerationRecord),
}

impl TokenInput {
    fn tokens(&self) -> &[u32] {
        match self {
            Self::Tokens(t) => t,
            Self::Record(r) => &r.tokens,
        }
    }
}

fn read_tokens(path: &Path) -> Result<TokenInput> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let is_record = reader.fill_buf()?.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{');
    if is_record {
        let record = record_from_reader(reader).with_context(|| format!("reading record {}", path.display()))?;
        Ok(TokenInput::Record(record))
    } else {
        let tokens = serde_json::from_reader(reader)
            .with_context(|| format!("{}: expected a JSON array of token ids", path.display()))?;
        Ok(TokenInput::Tokens(tokens))
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn generate(args: GenerateArgs) -> Result<()> {
    let source = args.source.load()?;
    let key = WatermarkKey::from_hex(&args.key)?;
    let config = GenerationConfig {
        max_tokens: args.max_tokens,
        sampling: match args.sampling {
            SamplingArg::Greedy => Sampling::Greedy,
            SamplingArg::Multinomial => Sampling::Multinomial,
        },
        sampling_seed: args.seed,
        weight_config: WeightConfig { omega: args.omega, ..WeightConfig::default() },
        partition_config: PartitionConfig {
            gamma: args.gamma,
            delta: args.delta,
            alpha: args.alpha,
            tau: args.tau,
            margin: args.margin,
            swap_cap: args.cap,
            ..PartitionConfig::default()
        },
        watermark_enabled: true,
    };
    let record = Generator::new(source.as_ref(), key, config)?.run(0)?;
    let mut out = output(args.out.as_deref())?;
    record_to_writer(&record, &mut out)?;
    out.flush()?;
    eprintln!(
        "generated {} tokens, {} green, mean kl {:.5}{}",
        record.tokens.len(),
        record.green_count(),
        record.mean_kl(),
        if record.truncated { " (trace exhausted)" } else { "" }
    );
    Ok(())
}

fn detect_cmd(args: DetectArgs) -> Result<()> {
    let input = read_tokens(&args.tokens)?;
    let key = WatermarkKey::from_hex(&args.key)?;
    let has_source = args.source.trace.is_some() || args.source.toy_seed.is_some();
    let mode = args.mode.unwrap_or(if has_source { DetectionMode::Replay } else { DetectionMode::KeyOnly });
    let (weight_config, mut partition_config) = match &input {
        TokenInput::Record(r) => (r.config_snapshot.weight_config.clone(), r.config_snapshot.partition_config.clone()),
        TokenInput::Tokens(_) => (WeightConfig::default(), PartitionConfig::default()),
    };
    if let Some(g) = args.gamma {
        partition_config.gamma = g;
    }

    let result = match mode {
        DetectionMode::KeyOnly => {
            let vocab_size = if has_source { args.source.load()?.spec().vocab_size } else { args.source.vocab };
            detect(input.tokens(), key, mode, partition_config.gamma, args.threshold, vocab_size, None)?
        }
        DetectionMode::Replay => {
            if !has_source {
                bail!("replay detection needs --trace or --toy-seed");
            }
            let source = args.source.load()?;
            let gamma = partition_config.gamma;
            let mut ctx = ReplayContext::new(source.as_ref(), key, weight_config, partition_config)?;
            if let TokenInput::Record(r) = &input {
                ctx = ctx.expect_fingerprint(r.model_fingerprint)?;
            }
            let vocab_size = source.spec().vocab_size;
            detect(input.tokens(), key, mode, gamma, args.threshold, vocab_size, Some(&ctx))?
        }
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn attack_cmd(args: AttackArgs) -> Result<()> {
    let input = read_tokens(&args.tokens)?;
    let source = args.source.load()?;
    let config = AttackConfig {
        kind: args.kind,
        rate: args.rate,
        seed: args.seed,
        window: args.window,
        neighbor_k: args.neighbor_k,
    };
    let attacked = apply_attack(input.tokens(), &config, source.text_embeddings())?;
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer(&mut out, &attacked)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let config = ExperimentConfig::from_file(&args.config)?;
    let reports =
        if args.variants.is_empty() { vec![run_eval(&config)?] } else { run_ablation(&config, &args.variants)? };
    print!("{}", render_table(&reports));
    if let Some(path) = args.out.as_ref().or(config.out.as_ref()) {
        let json = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])?
        } else {
            serde_json::to_string_pretty(&reports)?
        };
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn trace_gen(args: TraceGenArgs) -> Result<()> {
    let toy_config = ToyModelConfig {
        spec: ModelSpec::new(args.vocab, args.dim, args.nvision)?,
        seed: args.toy_seed,
        ..ToyModelConfig::default()
    };
    let model = ToyModel::new(toy_config)?;
    let rollout = GenerationConfig {
        max_tokens: args.steps,
        sampling_seed: args.toy_seed,
        watermark_enabled: false,
        ..GenerationConfig::default()
    };
    let tokens = Generator::new(&model, WatermarkKey(0), rollout)?.run(0)?.tokens;
    let trace = Trace::record(&model, &tokens)?.with_comment(format!("toy model seed {}", args.toy_seed));
    write_trace(&trace, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {} steps to {}", trace.steps.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::TraceGen(a) => trace_gen(a),
    }
}
