//! Trace messages, their compressed encoding, and the wire frame format.
//!
//! Program trace only reports discontinuities. A `BRANCH` message carries the
//! number of sequentially retired instructions since the previous program
//! message (`icnt`) and the target as a signed delta from the fall-through
//! address. `PROG_SYNC` carries a full program counter and is emitted at
//! stream start, every `sync_every` program messages, and (flagged `end`) when
//! a stream is closed. The decoder walks the program image between messages.
//!
//! Wire frame:
//!
//! ```text
//! source:u8 | kind:u8 | len:varint | payload[len] | crc8
//! payload = ts:varint | seq:varint | body
//! ```
//!
//! `crc8` uses polynomial 0x07, initial value 0, over header and payload.
//! Addresses are unsigned varints, deltas zigzag varints, data values little
//! endian.

use alloc::vec::Vec;
use thiserror::Error;

use crate::isa::{Instruction, Opcode, WORD};
use crate::machine::{DataAccess, Retire};
use crate::varint;

/// Trace file magic and version.
pub const MTRC_MAGIC: &[u8; 4] = b"MCDS";
pub const MTRC_VERSION: u8 = 0x01;

/// Source id used for gap markers that apply to every source.
pub const BROADCAST_SOURCE: u8 = 0xFF;

pub const DEFAULT_SYNC_EVERY: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
#[repr(u8)]
pub enum MessageKind {
    ProgSync = 0,
    Branch = 1,
    Data = 2,
    Mark = 3,
    TsSync = 4,
    Overflow = 5,
}

impl MessageKind {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => MessageKind::ProgSync,
            1 => MessageKind::Branch,
            2 => MessageKind::Data,
            3 => MessageKind::Mark,
            4 => MessageKind::TsSync,
            5 => MessageKind::Overflow,
            _ => return None,
        })
    }
}

/// Address field of a data message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AddrField {
    Absolute(u32),
    Delta(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum Payload {
    ProgSync { pc: u32, icnt: u32, end: bool },
    Branch { icnt: u32, delta: i64 },
    Data { addr: AddrField, size: u8, write: bool, value: u32 },
    Mark { state: u8 },
    TsSync { cycle: u64, width: u8 },
    Overflow { lost: u64 },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::ProgSync { .. } => MessageKind::ProgSync,
            Payload::Branch { .. } => MessageKind::Branch,
            Payload::Data { .. } => MessageKind::Data,
            Payload::Mark { .. } => MessageKind::Mark,
            Payload::TsSync { .. } => MessageKind::TsSync,
            Payload::Overflow { .. } => MessageKind::Overflow,
        }
    }
}

/// One trace record. `cycle` is filled in by the stamper or by timestamp
/// recovery and is never transmitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceMessage {
    pub source: u8,
    pub seq: u64,
    pub ts: u64,
    pub cycle: Option<u64>,
    pub payload: Payload,
}

impl TraceMessage {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    /// The message as it appears on the wire.
    pub fn without_cycle(self) -> Self {
        TraceMessage { cycle: None, ..self }
    }
}

pub fn crc8(data: &[u8]) -> u8 {
    let mut crc = 0u8;
    for &b in data {
        crc ^= b;
        for _ in 0..8 {
            crc = if crc & 0x80 != 0 { (crc << 1) ^ 0x07 } else { crc << 1 };
        }
    }
    crc
}

fn size_code(size: u8) -> u8 {
    match size {
        1 => 0,
        2 => 1,
        _ => 2,
    }
}

fn encode_body(p: &Payload, out: &mut Vec<u8>) {
    match *p {
        Payload::ProgSync { pc, icnt, end } => {
            out.push(u8::from(end));
            varint::put_u64(out, pc as u64);
            varint::put_u64(out, icnt as u64);
        }
        Payload::Branch { icnt, delta } => {
            varint::put_u64(out, icnt as u64);
            varint::put_i64(out, delta);
        }
        Payload::Data { addr, size, write, value } => {
            let abs = matches!(addr, AddrField::Absolute(_));
            out.push(size_code(size) | u8::from(write) << 2 | u8::from(abs) << 3);
            match addr {
                AddrField::Absolute(a) => varint::put_u64(out, a as u64),
                AddrField::Delta(d) => varint::put_i64(out, d),
            }
            let n = 1usize << size_code(size);
            out.extend_from_slice(&value.to_le_bytes()[..n]);
        }
        Payload::Mark { state } => out.push(state),
        Payload::TsSync { cycle, width } => {
            varint::put_u64(out, cycle);
            out.push(width);
        }
        Payload::Overflow { lost } => varint::put_u64(out, lost),
    }
}

/// Appends the frame for one message.
pub fn encode_frame(m: &TraceMessage, out: &mut Vec<u8>) {
    let mut payload = Vec::with_capacity(16);
    varint::put_u64(&mut payload, m.ts);
    varint::put_u64(&mut payload, m.seq);
    encode_body(&m.payload, &mut payload);
    let start = out.len();
    out.push(m.source);
    out.push(m.kind() as u8);
    varint::put_u64(out, payload.len() as u64);
    out.extend_from_slice(&payload);
    let crc = crc8(&out[start..]);
    out.push(crc);
}

pub fn serialize(messages: &[TraceMessage]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in messages {
        encode_frame(m, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FrameErrorKind {
    #[error("truncated frame")]
    Truncated,
    #[error("crc mismatch")]
    BadCrc,
    #[error("unknown message kind {0}")]
    BadKind(u8),
    #[error("payload does not match its length field")]
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("frame at byte {offset}: {kind}")]
pub struct FrameError {
    pub offset: usize,
    pub kind: FrameErrorKind,
}

fn decode_body(kind: MessageKind, b: &[u8], pos: &mut usize) -> Option<Payload> {
    let byte = |pos: &mut usize| -> Option<u8> {
        let v = *b.get(*pos)?;
        *pos += 1;
        Some(v)
    };
    Some(match kind {
        MessageKind::ProgSync => {
            let flags = byte(pos)?;
            if flags > 1 {
                return None;
            }
            let pc = u32::try_from(varint::get_u64(b, pos)?).ok()?;
            let icnt = u32::try_from(varint::get_u64(b, pos)?).ok()?;
            Payload::ProgSync { pc, icnt, end: flags == 1 }
        }
        MessageKind::Branch => {
            let icnt = u32::try_from(varint::get_u64(b, pos)?).ok()?;
            Payload::Branch { icnt, delta: varint::get_i64(b, pos)? }
        }
        MessageKind::Data => {
            let flags = byte(pos)?;
            if flags & 0x3 == 3 || flags >> 4 != 0 {
                return None;
            }
            let size = 1u8 << (flags & 3);
            let addr = if flags & 8 != 0 {
                AddrField::Absolute(u32::try_from(varint::get_u64(b, pos)?).ok()?)
            } else {
                AddrField::Delta(varint::get_i64(b, pos)?)
            };
            let mut v = [0u8; 4];
            for slot in v.iter_mut().take(size as usize) {
                *slot = byte(pos)?;
            }
            Payload::Data { addr, size, write: flags & 4 != 0, value: u32::from_le_bytes(v) }
        }
        MessageKind::Mark => Payload::Mark { state: byte(pos)? },
        MessageKind::TsSync => {
            let cycle = varint::get_u64(b, pos)?;
            Payload::TsSync { cycle, width: byte(pos)? }
        }
        MessageKind::Overflow => Payload::Overflow { lost: varint::get_u64(b, pos)? },
    })
}

/// Parses the frame starting at `offset`; returns the message and the offset after it.
pub fn decode_frame(buf: &[u8], offset: usize) -> Result<(TraceMessage, usize), FrameError> {
    let err = |kind| FrameError { offset, kind };
    let mut pos = offset;
    let source = *buf.get(pos).ok_or(err(FrameErrorKind::Truncated))?;
    let kind_byte = *buf.get(pos + 1).ok_or(err(FrameErrorKind::Truncated))?;
    pos += 2;
    let len = varint::get_u64(buf, &mut pos).ok_or(err(FrameErrorKind::Truncated))?;
    let len = usize::try_from(len).map_err(|_| err(FrameErrorKind::Malformed))?;
    let payload_end = pos.checked_add(len).ok_or(err(FrameErrorKind::Malformed))?;
    if payload_end >= buf.len() {
        return Err(err(FrameErrorKind::Truncated));
    }
    if crc8(&buf[offset..payload_end]) != buf[payload_end] {
        return Err(err(FrameErrorKind::BadCrc));
    }
    let kind = MessageKind::from_u8(kind_byte).ok_or(err(FrameErrorKind::BadKind(kind_byte)))?;
    let payload = &buf[pos..payload_end];
    let mut p = 0;
    let ts = varint::get_u64(payload, &mut p).ok_or(err(FrameErrorKind::Malformed))?;
    let seq = varint::get_u64(payload, &mut p).ok_or(err(FrameErrorKind::Malformed))?;
    let body = decode_body(kind, payload, &mut p).ok_or(err(FrameErrorKind::Malformed))?;
    if p != payload.len() {
        return Err(err(FrameErrorKind::Malformed));
    }
    Ok((TraceMessage { source, seq, ts, cycle: None, payload: body }, payload_end + 1))
}

/// Strict parse of concatenated frames.
pub fn deserialize(buf: &[u8]) -> Result<Vec<TraceMessage>, FrameError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        let (m, next) = decode_frame(buf, pos)?;
        out.push(m);
        pos = next;
    }
    Ok(out)
}

/// Tolerant parse: corrupted frames are skipped and replaced by a broadcast
/// `OVERFLOW` marker, and parsing resynchronizes on the next valid frame.
/// A truncated tail is dropped the same way.
pub fn deserialize_lossy(buf: &[u8]) -> (Vec<TraceMessage>, Vec<FrameError>) {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    let mut pos = 0;
    let mut in_gap = false;
    while pos < buf.len() {
        match decode_frame(buf, pos) {
            Ok((m, next)) => {
                out.push(m);
                pos = next;
                in_gap = false;
            }
            Err(e) => {
                if !in_gap {
                    errors.push(e);
                    out.push(gap_marker());
                    in_gap = true;
                }
                pos = resync(buf, pos);
            }
        }
    }
    (out, errors)
}

fn gap_marker() -> TraceMessage {
    TraceMessage { source: BROADCAST_SOURCE, seq: 0, ts: 0, cycle: None, payload: Payload::Overflow { lost: 1 } }
}

/// Next offset worth trying after a bad frame at `pos`: the end of the frame
/// as its length field claims, if a valid frame starts there, otherwise the
/// next byte.
fn resync(buf: &[u8], pos: usize) -> usize {
    let mut p = pos + 2;
    if let Some(len) = varint::get_u64(buf, &mut p) {
        if let Some(end) = usize::try_from(len).ok().and_then(|l| p.checked_add(l)).and_then(|e| e.checked_add(1)) {
            if end == buf.len() || (end < buf.len() && decode_frame(buf, end).is_ok()) {
                return end;
            }
        }
    }
    pos + 1
}

/// Wraps frames in the trace file container.
pub fn write_mtrc(frames: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(frames.len() + 5);
    out.extend_from_slice(MTRC_MAGIC);
    out.push(MTRC_VERSION);
    out.extend_from_slice(frames);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MtrcError {
    #[error("not a trace file (bad magic)")]
    BadMagic,
    #[error("unsupported trace file version {0}")]
    Version(u8),
}

/// Returns the frame bytes of a trace file.
pub fn read_mtrc(file: &[u8]) -> Result<&[u8], MtrcError> {
    if file.len() < 5 || &file[..4] != MTRC_MAGIC {
        return Err(MtrcError::BadMagic);
    }
    if file[4] != MTRC_VERSION {
        return Err(MtrcError::Version(file[4]));
    }
    Ok(&file[5..])
}

/// Program trace compressor for one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramEncoder {
    sync_every: u32,
    since_sync: u32,
    icnt: u32,
    next_pc: Option<u32>,
}

impl ProgramEncoder {
    pub fn new(sync_every: u32) -> Self {
        ProgramEncoder { sync_every: sync_every.max(1), since_sync: 0, icnt: 0, next_pc: None }
    }

    pub fn is_open(&self) -> bool {
        self.next_pc.is_some()
    }

    /// Messages emitted since the last `PROG_SYNC`; always below `sync_every`.
    pub fn since_sync(&self) -> u32 {
        self.since_sync
    }

    pub fn on_retire(&mut self, r: &Retire, out: &mut Vec<Payload>) {
        if self.next_pc.is_none() {
            out.push(Payload::ProgSync { pc: r.pc, icnt: 0, end: false });
            self.icnt = 0;
            self.since_sync = 0;
        }
        self.next_pc = Some(r.target);
        if !r.taken {
            self.icnt += 1;
            return;
        }
        let fall_through = r.pc.wrapping_add(WORD);
        let delta = r.target as i64 - fall_through as i64;
        out.push(Payload::Branch { icnt: self.icnt, delta });
        self.icnt = 0;
        self.since_sync += 1;
        if self.since_sync >= self.sync_every {
            out.push(Payload::ProgSync { pc: r.target, icnt: 0, end: false });
            self.since_sync = 0;
        }
    }

    /// Closes the stream so the decoder knows where execution stopped.
    pub fn close(&mut self, out: &mut Vec<Payload>) {
        if let Some(pc) = self.next_pc.take() {
            out.push(Payload::ProgSync { pc, icnt: self.icnt, end: true });
            self.icnt = 0;
            self.since_sync = 0;
        }
    }
}

/// Convenience: encodes a whole single-source retire stream (not closed).
pub fn encode_program(retires: &[Retire], sync_every: u32) -> Vec<Payload> {
    let mut enc = ProgramEncoder::new(sync_every);
    let mut out = Vec::new();
    for r in retires {
        enc.on_retire(r, &mut out);
    }
    out
}

/// Read-only view of a program image.
pub trait CodeImage {
    fn word(&self, addr: u32) -> Option<u32>;
}

#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub base: u32,
    pub bytes: &'a [u8],
}

impl CodeImage for ImageView<'_> {
    fn word(&self, addr: u32) -> Option<u32> {
        let off = addr.checked_sub(self.base)? as usize;
        let b = self.bytes.get(off..off.checked_add(4)?)?;
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ProgramDecodeErrorKind {
    #[error("address {0:#x} is outside the image or not an instruction")]
    OutsideImage(u32),
    #[error("unconditional jump at {0:#x} inside a sequential run")]
    UnexpectedJump(u32),
    #[error("HALT at {0:#x} inside a sequential run")]
    UnexpectedHalt(u32),
    #[error("no branch instruction at {0:#x}")]
    NotABranch(u32),
    #[error("branch at {pc:#x} targets {image:#x} but trace says {trace:#x}")]
    TargetMismatch { pc: u32, image: u32, trace: u32 },
    #[error("sync pc {trace:#x} disagrees with reconstructed pc {expected:#x}")]
    SyncMismatch { expected: u32, trace: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("program trace message {index}: {kind}")]
pub struct ProgramDecodeError {
    pub index: usize,
    pub kind: ProgramDecodeErrorKind,
}

/// Reconstructed instruction flow of one source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodedFlow {
    pub pcs: Vec<u32>,
    /// Positions in `pcs` where trace was lost; flow before and after is unrelated.
    pub gaps: Vec<usize>,
}

struct FlowWalker<'a, I: CodeImage> {
    image: &'a I,
    cursor: Option<u32>,
    flow: DecodedFlow,
}

impl<I: CodeImage> FlowWalker<'_, I> {
    fn insn(&self, pc: u32) -> Result<Instruction, ProgramDecodeErrorKind> {
        self.image.word(pc).and_then(|w| Instruction::decode(w).ok()).ok_or(ProgramDecodeErrorKind::OutsideImage(pc))
    }

    fn walk(&mut self, n: u32, allow_final_halt: bool) -> Result<(), ProgramDecodeErrorKind> {
        let Some(mut pc) = self.cursor else { return Ok(()) };
        for k in 0..n {
            let i = self.insn(pc)?;
            match i.opcode {
                Opcode::Jmp => return Err(ProgramDecodeErrorKind::UnexpectedJump(pc)),
                Opcode::Halt if !(allow_final_halt && k + 1 == n) => return Err(ProgramDecodeErrorKind::UnexpectedHalt(pc)),
                _ => {}
            }
            self.flow.pcs.push(pc);
            pc = pc.wrapping_add(WORD);
        }
        self.cursor = Some(pc);
        Ok(())
    }

    /// Walks from the cursor until a HALT (inclusive).
    fn walk_to_halt(&mut self) -> Result<(), ProgramDecodeErrorKind> {
        let Some(mut pc) = self.cursor else { return Ok(()) };
        loop {
            let i = self.insn(pc)?;
            if i.opcode == Opcode::Jmp {
                return Err(ProgramDecodeErrorKind::UnexpectedJump(pc));
            }
            self.flow.pcs.push(pc);
            if i.opcode == Opcode::Halt && !i.is_bkpt() {
                self.cursor = None;
                return Ok(());
            }
            pc = pc.wrapping_add(WORD);
        }
    }
}

/// Rebuilds the retired pc sequence of `source` from its program messages.
///
/// A stream that ends without a closing `PROG_SYNC` is assumed to have run
/// to a HALT.
pub fn decode_program<I: CodeImage>(messages: &[TraceMessage], source: u8, image: &I) -> Result<DecodedFlow, ProgramDecodeError> {
    let mut w = FlowWalker { image, cursor: None, flow: DecodedFlow::default() };
    for (index, m) in messages.iter().enumerate() {
        if m.source != source && m.source != BROADCAST_SOURCE {
            continue;
        }
        let err = |kind| ProgramDecodeError { index, kind };
        match m.payload {
            Payload::ProgSync { pc, icnt, end } => {
                if w.cursor.is_some() {
                    w.walk(icnt, end).map_err(err)?;
                    let expected = w.cursor.unwrap_or(pc);
                    if expected != pc {
                        return Err(err(ProgramDecodeErrorKind::SyncMismatch { expected, trace: pc }));
                    }
                }
                w.cursor = if end { None } else { Some(pc) };
            }
            Payload::Branch { icnt, delta } => {
                if w.cursor.is_none() {
                    continue;
                }
                w.walk(icnt, false).map_err(err)?;
                let pc = w.cursor.expect("cursor set");
                let i = w.insn(pc).map_err(err)?;
                if !i.opcode.is_branch() {
                    return Err(err(ProgramDecodeErrorKind::NotABranch(pc)));
                }
                let trace = (pc.wrapping_add(WORD) as i64 + delta) as u32;
                let image_target = i.branch_target(pc);
                if trace != image_target {
                    return Err(err(ProgramDecodeErrorKind::TargetMismatch { pc, image: image_target, trace }));
                }
                w.flow.pcs.push(pc);
                w.cursor = Some(trace);
            }
            Payload::Overflow { .. } => {
                if w.flow.gaps.last() != Some(&w.flow.pcs.len()) {
                    w.flow.gaps.push(w.flow.pcs.len());
                }
                w.cursor = None;
            }
            _ => {}
        }
    }
    w.walk_to_halt().map_err(|kind| ProgramDecodeError { index: messages.len(), kind })?;
    Ok(w.flow)
}

/// A data access as reconstructed from trace (no cycle, no source).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DataRecord {
    pub addr: u32,
    pub value: u32,
    pub size: u8,
    pub write: bool,
}

impl From<&DataAccess> for DataRecord {
    fn from(a: &DataAccess) -> Self {
        DataRecord { addr: a.addr, value: a.value, size: a.size, write: a.write }
    }
}

/// Data trace compressor for one source: addresses are deltas from the
/// previous access, with an absolute address at start and every
/// `sync_every` messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataEncoder {
    sync_every: u32,
    since_abs: u32,
    last: Option<u32>,
}

impl DataEncoder {
    pub fn new(sync_every: u32) -> Self {
        DataEncoder { sync_every: sync_every.max(1), since_abs: 0, last: None }
    }

    /// Forces the next message to carry an absolute address.
    pub fn restart(&mut self) {
        self.last = None;
    }

    pub fn encode(&mut self, a: &DataRecord) -> Payload {
        let addr = match self.last {
            Some(prev) if self.since_abs < self.sync_every => {
                self.since_abs += 1;
                AddrField::Delta(a.addr as i64 - prev as i64)
            }
            _ => {
                self.since_abs = 1;
                AddrField::Absolute(a.addr)
            }
        };
        self.last = Some(a.addr);
        let mask = match a.size {
            1 => 0xFF,
            2 => 0xFFFF,
            _ => u32::MAX,
        };
        Payload::Data { addr, size: a.size, write: a.write, value: a.value & mask }
    }
}

pub fn encode_data(accesses: &[DataRecord], sync_every: u32) -> Vec<Payload> {
    let mut enc = DataEncoder::new(sync_every);
    accesses.iter().map(|a| enc.encode(a)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DataDecodeError {
    #[error("data message {0} has a relative address but no preceding absolute one")]
    MissingBase(usize),
}

/// Inverts [`encode_data`] for the data messages of `source`. A gap marker
/// drops the address base; deltas up to the next absolute address are errors.
pub fn decode_data(messages: &[TraceMessage], source: u8) -> Result<Vec<DataRecord>, DataDecodeError> {
    let mut last: Option<u32> = None;
    let mut out = Vec::new();
    for (i, m) in messages.iter().enumerate() {
        if m.source != source && m.source != BROADCAST_SOURCE {
            continue;
        }
        match m.payload {
            Payload::Data { addr, size, write, value } => {
                let a = match addr {
                    AddrField::Absolute(a) => a,
                    AddrField::Delta(d) => {
                        let base = last.ok_or(DataDecodeError::MissingBase(i))?;
                        (base as i64 + d) as u32
                    }
                };
                last = Some(a);
                out.push(DataRecord { addr: a, value, size, write });
            }
            Payload::Overflow { .. } => last = None,
            _ => {}
        }
    }
    Ok(out)
}
