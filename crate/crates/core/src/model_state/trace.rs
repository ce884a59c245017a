//! `AGMTRACE v1`: one JSON object per line.
//!
//! ```text
//! {"format":"AGMTRACE","version":1,"vocab_size":V,"embed_dim":d,"n_vision":n}
//! {"text_embeddings":"<base64>"}
//! {"vision_embeddings":"<base64>"}
//! {"logits":"<base64>","vision_attention":"<base64>","hidden":"<base64>","token":7}
//! ...
//! ```
//!
//! Every payload is standard padded base64 of row-major little-endian IEEE-754
//! binary32 values. `token` is optional. Each line, including the last, ends in
//! `\n`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{check_attention, ModelSource, ModelSpec, StepState};
use crate::error::{Error, Result, TraceError};
use crate::numerics::{RealMatrix, RealVector};
use crate::rng::fingerprint;

pub const TRACE_FORMAT: &str = "AGMTRACE";
pub const TRACE_VERSION: u64 = 1;

/// A recorded generation: embeddings once, then one state per step.
#[derive(Debug, Clone)]
pub struct Trace {
    pub spec: ModelSpec,
    pub text_embeddings: RealMatrix,
    pub vision_embeddings: RealMatrix,
    pub steps: Vec<StepState>,
    /// Token emitted at each step, when recorded. Same length as `steps`.
    pub step_tokens: Vec<Option<u32>>,
    /// Free-form provenance note carried in the header.
    pub comment: Option<String>,
    fingerprint: OnceLock<u64>,
}

impl PartialEq for Trace {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.text_embeddings == other.text_embeddings
            && self.vision_embeddings == other.vision_embeddings
            && self.steps == other.steps
            && self.step_tokens == other.step_tokens
            && self.comment == other.comment
    }
}

impl Trace {
    pub fn new(
        spec: ModelSpec,
        text_embeddings: RealMatrix,
        vision_embeddings: RealMatrix,
        steps: Vec<StepState>,
        step_tokens: Vec<Option<u32>>,
    ) -> Result<Self> {
        spec.validate()?;
        let dims = |m: &RealMatrix, rows: usize, name: &str| {
            if m.rows() == rows && m.cols() == spec.embed_dim {
                Ok(())
            } else {
                Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {rows}x{}",
                    m.rows(),
                    m.cols(),
                    spec.embed_dim
                )))
            }
        };
        dims(&text_embeddings, spec.vocab_size, "text_embeddings")?;
        dims(&vision_embeddings, spec.n_vision, "vision_embeddings")?;
        if step_tokens.len() != steps.len() {
            return Err(Error::Dimension(format!("{} step tokens for {} steps", step_tokens.len(), steps.len())));
        }
        for step in &steps {
            step.validate(&spec)?;
        }
        for tok in step_tokens.iter().flatten() {
            spec.check_token(*tok)?;
        }
        Ok(Self {
            spec,
            text_embeddings,
            vision_embeddings,
            steps,
            step_tokens,
            comment: None,
            fingerprint: OnceLock::new(),
        })
    }

    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.comment = Some(comment.into());
        self
    }

    /// Records `steps` states from `source`, feeding back `tokens[t]` as the
    /// emitted token at step `t`.
    pub fn record<S: ModelSource + ?Sized>(source: &S, tokens: &[u32]) -> Result<Self> {
        let mut steps = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            match source.step(&tokens[..t])? {
                Some(state) => steps.push(state),
                None => return Err(Error::TraceExhausted(t)),
            }
        }
        Trace::new(
            source.spec(),
            source.text_embeddings().clone(),
            source.vision_embeddings().clone(),
            steps,
            tokens.iter().copied().map(Some).collect(),
        )
    }
}

impl ModelSource for Trace {
    fn spec(&self) -> ModelSpec {
        self.spec
    }

    fn text_embeddings(&self) -> &RealMatrix {
        &self.text_embeddings
    }

    fn vision_embeddings(&self) -> &RealMatrix {
        &self.vision_embeddings
    }

    /// Returns the recorded state for position `prefix.len()`. The prefix
    /// contents are not consulted.
    fn step(&self, prefix: &[u32]) -> Result<Option<StepState>> {
        for &tok in prefix {
            self.spec.check_token(tok)?;
        }
        Ok(self.steps.get(prefix.len()).cloned())
    }

    fn horizon(&self) -> Option<usize> {
        Some(self.steps.len())
    }

    fn fingerprint(&self) -> u64 {
        *self.fingerprint.get_or_init(|| {
            let floats = self
                .text_embeddings
                .values()
                .iter()
                .chain(self.vision_embeddings.values())
                .chain(
                    self.steps
                        .iter()
                        .flat_map(|s| s.logits.iter().chain(s.vision_attention.iter()).chain(s.hidden.iter())),
                )
                .map(|v| u64::from(v.to_bits()));
            fingerprint(
                [
                    0x4147_4d54_5241_4345, // "AGMTRACE"
                    self.spec.vocab_size as u64,
                    self.spec.embed_dim as u64,
                    self.spec.n_vision as u64,
                    self.steps.len() as u64,
                ]
                .into_iter()
                .chain(floats),
            )
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u64,
    vocab_size: u64,
    embed_dim: u64,
    n_vision: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comment: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TextLine {
    text_embeddings: String,
}

#[derive(Serialize, Deserialize)]
struct VisionLine {
    vision_embeddings: String,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    logits: String,
    vision_attention: String,
    hidden: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token: Option<u32>,
}

fn encode(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str, line: usize, field: &'static str, expected: usize) -> Result<Vec<f32>, TraceError> {
    let bytes = STANDARD.decode(text).map_err(|source| TraceError::Base64 { line, field, source })?;
    if bytes.len() % 4 != 0 {
        return Err(TraceError::Misaligned { line, field, bytes: bytes.len() });
    }
    let found = bytes.len() / 4;
    if found != expected {
        return Err(TraceError::Dimension { line, field, expected, found });
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(TraceError::InvalidValue { line, field, reason: format!("entry {i} is not finite") });
    }
    Ok(values)
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<(), TraceError> {
    serde_json::to_writer(&mut *out, value).map_err(|source| TraceError::Malformed { line: 0, source })?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn trace_to_writer<W: Write>(trace: &Trace, mut out: W) -> Result<(), TraceError> {
    write_line(
        &mut out,
        &Header {
            format: TRACE_FORMAT.to_string(),
            version: TRACE_VERSION,
            vocab_size: trace.spec.vocab_size as u64,
            embed_dim: trace.spec.embed_dim as u64,
            n_vision: trace.spec.n_vision as u64,
            comment: trace.comment.clone(),
        },
    )?;
    write_line(&mut out, &TextLine { text_embeddings: encode(trace.text_embeddings.values()) })?;
    write_line(&mut out, &VisionLine { vision_embeddings: encode(trace.vision_embeddings.values()) })?;
    for (step, token) in trace.steps.iter().zip(&trace.step_tokens) {
        write_line(
            &mut out,
            &StepLine {
                logits: encode(&step.logits),
                vision_attention: encode(&step.vision_attention),
                hidden: encode(&step.hidden),
                token: *token,
            },
        )?;
    }
    Ok(())
}

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let mut out = BufWriter::new(File::create(path)?);
    trace_to_writer(trace, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    trace_from_reader(BufReader::new(File::open(path)?))
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, line: usize) -> Result<T, TraceError> {
    serde_json::from_str(text).map_err(|source| TraceError::Malformed { line, source })
}

pub fn trace_from_reader<R: Read>(reader: R) -> Result<Trace, TraceError> {
    let mut reader = BufReader::new(reader);
    let mut lines = Vec::new();
    loop {
        let mut buf = String::new();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        if !buf.ends_with('\n') {
            return Err(TraceError::Truncated(format!("line {} has no terminating newline", lines.len() + 1)));
        }
        buf.pop();
        if buf.ends_with('\r') {
            buf.pop();
        }
        lines.push(buf);
    }

    let header_text = lines.first().ok_or_else(|| TraceError::Truncated("empty file".into()))?;
    let header: Header = parse(header_text, 1)?;
    if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
        return Err(TraceError::Version { line: 1, format: header.format, version: header.version });
    }
    let to_usize = |v: u64| usize::try_from(v).unwrap_or(usize::MAX);
    let spec = ModelSpec {
        vocab_size: to_usize(header.vocab_size),
        embed_dim: to_usize(header.embed_dim),
        n_vision: to_usize(header.n_vision),
    };
    spec.validate().map_err(|e| TraceError::InvalidSpec { line: 1, reason: e.to_string() })?;

    if lines.len() < 3 {
        return Err(TraceError::Truncated(format!(
            "expected header and two embedding lines, found {} line(s)",
            lines.len()
        )));
    }
    let text: TextLine = parse(&lines[1], 2)?;
    let text = decode(&text.text_embeddings, 2, "text_embeddings", spec.vocab_size * spec.embed_dim)?;
    let vision: VisionLine = parse(&lines[2], 3)?;
    let vision = decode(&vision.vision_embeddings, 3, "vision_embeddings", spec.n_vision * spec.embed_dim)?;

    let mut steps = Vec::with_capacity(lines.len() - 3);
    let mut tokens = Vec::with_capacity(lines.len() - 3);
    for (i, text) in lines.iter().enumerate().skip(3) {
        let line = i + 1;
        let record: StepLine = parse(text, line)?;
        let logits = decode(&record.logits, line, "logits", spec.vocab_size)?;
        let attention = decode(&record.vision_attention, line, "vision_attention", spec.n_vision)?;
        let hidden = decode(&record.hidden, line, "hidden", spec.embed_dim)?;
        check_attention(&attention).map_err(|e| TraceError::InvalidValue {
            line,
            field: "vision_attention",
            reason: e.to_string(),
        })?;
        if let Some(tok) = record.token {
            if tok as usize >= spec.vocab_size {
                return Err(TraceError::InvalidValue {
                    line,
                    field: "token",
                    reason: format!("{tok} is outside the vocabulary"),
                });
            }
        }
        steps.push(StepState {
            logits: RealVector::new(logits).expect("decoded values are finite"),
            vision_attention: RealVector::new(attention).expect("decoded values are finite"),
            hidden: RealVector::new(hidden).expect("decoded values are finite"),
        });
        tokens.push(record.token);
    }

    let matrix = |rows, values| RealMatrix::new(rows, spec.embed_dim, values).expect("dimensions checked");
    let mut trace = Trace::new(spec, matrix(spec.vocab_size, text), matrix(spec.n_vision, vision), steps, tokens)
        .map_err(|e| TraceError::InvalidSpec { line: 1, reason: e.to_string() })?;
    trace.comment = header.comment;
    Ok(trace)
}
