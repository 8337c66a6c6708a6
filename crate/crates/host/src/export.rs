//! Trace files: `.mtrc` (bit-exact frames) and `.jsonl` (one decoded message per line).

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use mcds_core::codec::{self, decode_program, ImageView, MtrcError, TraceMessage, BROADCAST_SOURCE};
use mcds_core::timestamp::{recover_cycles, RecoverMode};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {error}")]
    Io { path: String, error: std::io::Error },
    #[error("{0}")]
    Mtrc(#[from] MtrcError),
    #[error("serializing message: {0}")]
    Json(#[from] serde_json::Error),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |error| ExportError::Io { path: path.display().to_string(), error }
}

/// The `.mtrc` image of a merged trace.
pub fn mtrc_bytes(messages: &[TraceMessage]) -> Vec<u8> {
    codec::write_mtrc(&codec::serialize(messages))
}

pub fn write_mtrc(path: &Path, messages: &[TraceMessage]) -> Result<(), ExportError> {
    std::fs::write(path, mtrc_bytes(messages)).map_err(io(path))
}

pub fn jsonl(messages: &[TraceMessage]) -> Result<String, ExportError> {
    let mut out = String::new();
    for m in messages {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, messages: &[TraceMessage]) -> Result<(), ExportError> {
    let text = jsonl(messages)?;
    let mut f = std::fs::File::create(path).map_err(io(path))?;
    f.write_all(text.as_bytes()).map_err(io(path))
}

/// A trace file read back with cycles recovered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub messages: Vec<TraceMessage>,
    /// Corrupt regions skipped while reading, as (offset, reason).
    pub damaged: Vec<(usize, String)>,
}

/// Parses `.mtrc` bytes. Damaged frames become `OVERFLOW` markers and the
/// affected sources resynchronize at their next `TS_SYNC`.
pub fn decode_mtrc(file: &[u8]) -> Result<Decoded, ExportError> {
    let frames = codec::read_mtrc(file)?;
    let (wire, errors) = codec::deserialize_lossy(frames);
    let messages = recover_cycles(&wire, RecoverMode::Resync).expect("resync mode does not fail");
    Ok(Decoded { messages, damaged: errors.iter().map(|e| (e.offset, e.kind.to_string())).collect() })
}

pub fn read_mtrc(path: &Path) -> Result<Decoded, ExportError> {
    decode_mtrc(&std::fs::read(path).map_err(io(path))?)
}

/// Per-source program flow reconstructed against a code image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowSummary {
    pub source: u8,
    pub instructions: usize,
    pub gaps: usize,
    pub error: Option<String>,
}

pub fn flow_summary(messages: &[TraceMessage], image: ImageView<'_>) -> Vec<FlowSummary> {
    let sources: BTreeSet<u8> = messages
        .iter()
        .filter(|m| m.source != BROADCAST_SOURCE && matches!(m.kind(), codec::MessageKind::ProgSync | codec::MessageKind::Branch))
        .map(|m| m.source)
        .collect();
    sources
        .into_iter()
        .map(|source| match decode_program(messages, source, &image) {
            Ok(f) => FlowSummary { source, instructions: f.pcs.len(), gaps: f.gaps.len(), error: None },
            Err(e) => FlowSummary { source, instructions: 0, gaps: 0, error: Some(e.to_string()) },
        })
        .collect()
}
