//! Truncated timestamps, periodic sync records, and cycle recovery.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use thiserror::Error;

use crate::codec::{Payload, TraceMessage, BROADCAST_SOURCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TimestampConfig {
    /// Width `W` of the per-message timestamp in bits.
    pub width: u8,
    /// Maximum cycles between sync records of one source.
    pub sync_period: u64,
}

impl Default for TimestampConfig {
    fn default() -> Self {
        TimestampConfig::with_width(16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TimestampConfigError {
    #[error("timestamp width {0} not in 2..=63")]
    Width(u8),
    #[error("sync period {period} must be in 1..{limit}")]
    SyncPeriod { period: u64, limit: u64 },
}

impl TimestampConfig {
    /// `W` bits with the default sync period `2^(W-2)`.
    pub fn with_width(width: u8) -> Self {
        TimestampConfig { width, sync_period: 1u64 << width.saturating_sub(2).min(63) }
    }

    pub fn validate(&self) -> Result<(), TimestampConfigError> {
        if !(2..=63).contains(&self.width) {
            return Err(TimestampConfigError::Width(self.width));
        }
        let limit = 1u64 << (self.width - 1);
        if self.sync_period == 0 || self.sync_period >= limit {
            return Err(TimestampConfigError::SyncPeriod { period: self.sync_period, limit });
        }
        Ok(())
    }

    pub fn truncate(&self, cycle: u64) -> u64 {
        cycle & mask(self.width)
    }
}

fn mask(width: u8) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Per-source stamping state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamper {
    source: u8,
    config: TimestampConfig,
    seq: u64,
    last_sync: Option<u64>,
}

impl Stamper {
    pub fn new(source: u8, config: TimestampConfig) -> Self {
        Stamper { source, config, seq: 0, last_sync: None }
    }

    pub fn source(&self) -> u8 {
        self.source
    }

    pub fn next_seq(&self) -> u64 {
        self.seq
    }

    pub fn set_next_seq(&mut self, seq: u64) {
        self.seq = seq;
    }

    fn emit(&mut self, cycle: u64, payload: Payload, out: &mut Vec<TraceMessage>) {
        out.push(TraceMessage { source: self.source, seq: self.seq, ts: self.config.truncate(cycle), cycle: Some(cycle), payload });
        self.seq += 1;
    }

    /// Stamps one message, preceded by a `TS_SYNC` when the stream has none
    /// yet or the last one is `sync_period` or more cycles old.
    pub fn push(&mut self, cycle: u64, payload: Payload, out: &mut Vec<TraceMessage>) {
        let due = match self.last_sync {
            None => true,
            Some(s) => cycle.saturating_sub(s) >= self.config.sync_period,
        };
        if due && !matches!(payload, Payload::TsSync { .. }) {
            self.emit(cycle, Payload::TsSync { cycle, width: self.config.width }, out);
            self.last_sync = Some(cycle);
        }
        if let Payload::TsSync { cycle: c, .. } = payload {
            self.last_sync = Some(c);
        }
        self.emit(cycle, payload, out);
    }
}

/// Stamps a cycle-ordered event stream of one source.
pub fn stamp(source: u8, events: &[(u64, Payload)], config: TimestampConfig) -> Vec<TraceMessage> {
    let mut s = Stamper::new(source, config);
    let mut out = Vec::with_capacity(events.len() + 1);
    for &(cycle, p) in events {
        s.push(cycle, p, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoverMode {
    /// Every source must open with `TS_SYNC`.
    Strict,
    /// Messages before a source's first `TS_SYNC` are dropped, as when
    /// reading a wrapped circular buffer.
    Resync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RecoverError {
    #[error("message {index} of source {src} precedes any TS_SYNC")]
    MissingSync { index: usize, src: u8 },
}

#[derive(Debug, Clone, Copy)]
struct SourceClock {
    cycle: u64,
    ts: u64,
    width: u8,
}

/// Reconstructs full cycle numbers.
///
/// Each message is unwrapped against the previous one of its source. A
/// forward distance of `2^(W-1)` or more cannot be told apart from a
/// backward step and is treated as lost time: the source's messages are
/// dropped up to its next `TS_SYNC`, which is preceded by an `OVERFLOW`
/// counting the dropped messages. `OVERFLOW` messages already present pass
/// through and desynchronize their source (all sources for broadcast ones).
pub fn recover_cycles(messages: &[TraceMessage], mode: RecoverMode) -> Result<Vec<TraceMessage>, RecoverError> {
    let mut clocks: BTreeMap<u8, Option<SourceClock>> = BTreeMap::new();
    let mut dropped: BTreeMap<u8, u64> = BTreeMap::new();
    let mut last_cycle = 0u64;
    let mut out = Vec::with_capacity(messages.len());
    for (index, m) in messages.iter().enumerate() {
        if let Payload::Overflow { .. } = m.payload {
            if m.source == BROADCAST_SOURCE {
                clocks.values_mut().for_each(|c| *c = None);
            } else {
                clocks.insert(m.source, None);
            }
            out.push(TraceMessage { cycle: Some(last_cycle), ..*m });
            continue;
        }
        if let Payload::TsSync { cycle, width } = m.payload {
            if let Some(lost) = dropped.remove(&m.source).filter(|&n| n > 0) {
                out.push(TraceMessage { source: m.source, seq: m.seq, ts: m.ts, cycle: Some(cycle), payload: Payload::Overflow { lost } });
            }
            clocks.insert(m.source, Some(SourceClock { cycle, ts: m.ts, width }));
            last_cycle = cycle;
            out.push(TraceMessage { cycle: Some(cycle), ..*m });
            continue;
        }
        match clocks.get(&m.source).copied().flatten() {
            None => {
                if mode == RecoverMode::Strict && !clocks.contains_key(&m.source) {
                    return Err(RecoverError::MissingSync { index, src: m.source });
                }
                *dropped.entry(m.source).or_default() += 1;
            }
            Some(clk) => {
                let mk = mask(clk.width);
                let delta = m.ts.wrapping_sub(clk.ts) & mk;
                if delta >= 1u64 << (clk.width - 1) {
                    clocks.insert(m.source, None);
                    *dropped.entry(m.source).or_default() += 1;
                    continue;
                }
                let cycle = clk.cycle + delta;
                clocks.insert(m.source, Some(SourceClock { cycle, ts: m.ts, width: clk.width }));
                last_cycle = cycle;
                out.push(TraceMessage { cycle: Some(cycle), ..*m });
            }
        }
    }
    Ok(out)
}

/// Interleaves recovered streams by (cycle, source, seq).
pub fn merge(streams: &[Vec<TraceMessage>]) -> Vec<TraceMessage> {
    let mut all: Vec<TraceMessage> = streams.iter().flatten().copied().collect();
    all.sort_by_key(|m| (m.cycle.unwrap_or(0), m.source, m.seq));
    all
}
