//! Measurement and calibration server (XCP subset) and the latency ledger
//! of its transports.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::machine::Machine;

pub mod cmd {
    pub const CONNECT: u8 = 0xFF;
    pub const DISCONNECT: u8 = 0xFE;
    pub const GET_STATUS: u8 = 0xFD;
    pub const SHORT_UPLOAD: u8 = 0xF4;
    pub const DOWNLOAD: u8 = 0xF0;
    pub const SET_CAL_PAGE: u8 = 0xEB;
    pub const GET_CAL_PAGE: u8 = 0xEA;
    pub const START_STOP_DAQ: u8 = 0xDE;
}

pub mod err {
    pub const SEQUENCE: u8 = 0x1D;
    pub const CMD_UNKNOWN: u8 = 0x20;
    pub const CMD_SYNTAX: u8 = 0x21;
    pub const OUT_OF_RANGE: u8 = 0x22;
}

pub const POSITIVE: u8 = 0xFF;
pub const ERROR: u8 = 0xFE;
pub const HEADER_LEN: usize = 4;
pub const MAX_DAQ_ENTRY: u8 = 8;
pub const MAX_DAQ_BYTES: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XcpFrame {
    pub ctr: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum XcpFrameError {
    #[error("frame truncated")]
    Truncated,
    #[error("frame with empty payload")]
    Empty,
    #[error("payload of {0} bytes does not fit a frame")]
    TooLong(usize),
}

impl XcpFrame {
    pub fn new(ctr: u16, payload: Vec<u8>) -> Self {
        XcpFrame { ctr, payload }
    }

    pub fn pid(&self) -> u8 {
        self.payload.first().copied().unwrap_or(0)
    }

    pub fn encode(&self) -> Result<Vec<u8>, XcpFrameError> {
        let len = u16::try_from(self.payload.len()).map_err(|_| XcpFrameError::TooLong(self.payload.len()))?;
        if len == 0 {
            return Err(XcpFrameError::Empty);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.ctr.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses one frame from the front of `buf`; returns it and the bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(XcpFrame, usize), XcpFrameError> {
        if buf.len() < HEADER_LEN {
            return Err(XcpFrameError::Truncated);
        }
        let len = u16::from_le_bytes([buf[0], buf[1]]) as usize;
        let ctr = u16::from_le_bytes([buf[2], buf[3]]);
        if len == 0 {
            return Err(XcpFrameError::Empty);
        }
        let end = HEADER_LEN + len;
        if buf.len() < end {
            return Err(XcpFrameError::Truncated);
        }
        Ok((XcpFrame { ctr, payload: buf[HEADER_LEN..end].to_vec() }, end))
    }
}

/// What the server needs from the device: the debug port and the page
/// select register.
pub trait CalibrationTarget {
    fn read(&self, addr: u32, len: usize) -> Option<Vec<u8>>;
    fn write(&mut self, addr: u32, bytes: &[u8]) -> bool;
    fn set_page(&mut self, page: u8) -> bool;
    fn page(&self) -> u8;
}

impl CalibrationTarget for Machine {
    fn read(&self, addr: u32, len: usize) -> Option<Vec<u8>> {
        self.debug_read(addr, len).ok()
    }

    fn write(&mut self, addr: u32, bytes: &[u8]) -> bool {
        self.debug_write(addr, bytes).is_ok()
    }

    fn set_page(&mut self, page: u8) -> bool {
        self.emu_mut().set_cal_page(page).is_ok()
    }

    fn page(&self) -> u8 {
        self.emu().cal_page()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DaqEntry {
    pub addr: u32,
    pub len: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DaqList {
    pub id: u8,
    pub entries: Vec<DaqEntry>,
    pub period: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DaqError {
    #[error("DAQ list {0}: period must be at least 1")]
    Period(u8),
    #[error("DAQ list {list}: entry {entry} length must be 1..={MAX_DAQ_ENTRY}")]
    EntryLen { list: u8, entry: usize },
    #[error("DAQ list {0}: more than {MAX_DAQ_BYTES} sample bytes")]
    TooLarge(u8),
    #[error("DAQ list id {0} defined twice")]
    Duplicate(u8),
}

impl DaqList {
    pub fn validate(&self) -> Result<(), DaqError> {
        if self.period == 0 {
            return Err(DaqError::Period(self.id));
        }
        for (entry, e) in self.entries.iter().enumerate() {
            if e.len == 0 || e.len > MAX_DAQ_ENTRY {
                return Err(DaqError::EntryLen { list: self.id, entry });
            }
        }
        if self.entries.iter().map(|e| e.len as usize).sum::<usize>() > MAX_DAQ_BYTES {
            return Err(DaqError::TooLarge(self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct XcpServer {
    connected: bool,
    daq: Vec<DaqList>,
    daq_ctr: u16,
}

fn error(code: u8) -> Vec<u8> {
    vec![ERROR, code]
}

fn u32_at(p: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([p[at], p[at + 1], p[at + 2], p[at + 3]])
}

impl XcpServer {
    pub fn new(daq: Vec<DaqList>) -> Result<Self, DaqError> {
        for (i, l) in daq.iter().enumerate() {
            l.validate()?;
            if daq[..i].iter().any(|o| o.id == l.id) {
                return Err(DaqError::Duplicate(l.id));
            }
        }
        Ok(XcpServer { connected: false, daq, daq_ctr: 0 })
    }

    pub fn connected(&self) -> bool {
        self.connected
    }

    pub fn daq_lists(&self) -> &[DaqList] {
        &self.daq
    }

    /// Handles one command. The response echoes the request counter.
    pub fn serve<T: CalibrationTarget + ?Sized>(&mut self, req: &XcpFrame, target: &mut T) -> XcpFrame {
        XcpFrame { ctr: req.ctr, payload: self.dispatch(&req.payload, target) }
    }

    fn dispatch<T: CalibrationTarget + ?Sized>(&mut self, p: &[u8], target: &mut T) -> Vec<u8> {
        let Some(&pid) = p.first() else { return error(err::CMD_SYNTAX) };
        let known = matches!(
            pid,
            cmd::CONNECT
                | cmd::DISCONNECT
                | cmd::GET_STATUS
                | cmd::SHORT_UPLOAD
                | cmd::DOWNLOAD
                | cmd::SET_CAL_PAGE
                | cmd::GET_CAL_PAGE
                | cmd::START_STOP_DAQ
        );
        if !known {
            return error(err::CMD_UNKNOWN);
        }
        if !self.connected && pid != cmd::CONNECT {
            return error(err::SEQUENCE);
        }
        match pid {
            cmd::CONNECT => {
                self.connected = true;
                vec![POSITIVE]
            }
            cmd::DISCONNECT => {
                self.connected = false;
                self.daq.iter_mut().for_each(|l| l.active = false);
                vec![POSITIVE]
            }
            cmd::GET_STATUS => {
                let active = self.daq.iter().filter(|l| l.active).count() as u8;
                let flags = u8::from(self.connected) | u8::from(active > 0) << 1;
                vec![POSITIVE, flags, target.page(), active]
            }
            cmd::SHORT_UPLOAD => {
                if p.len() != 6 || p[5] == 0 {
                    return error(err::CMD_SYNTAX);
                }
                match target.read(u32_at(p, 1), p[5] as usize) {
                    Some(bytes) => {
                        let mut out = vec![POSITIVE];
                        out.extend(bytes);
                        out
                    }
                    None => error(err::OUT_OF_RANGE),
                }
            }
            cmd::DOWNLOAD => {
                if p.len() < 6 {
                    return error(err::CMD_SYNTAX);
                }
                if target.write(u32_at(p, 1), &p[5..]) {
                    vec![POSITIVE]
                } else {
                    error(err::OUT_OF_RANGE)
                }
            }
            cmd::SET_CAL_PAGE => {
                if p.len() != 2 {
                    return error(err::CMD_SYNTAX);
                }
                if target.set_page(p[1]) {
                    vec![POSITIVE]
                } else {
                    error(err::OUT_OF_RANGE)
                }
            }
            cmd::GET_CAL_PAGE => {
                if p.len() != 1 {
                    return error(err::CMD_SYNTAX);
                }
                vec![POSITIVE, target.page()]
            }
            cmd::START_STOP_DAQ => {
                if p.len() != 3 || p[2] > 1 {
                    return error(err::CMD_SYNTAX);
                }
                match self.daq.iter_mut().find(|l| l.id == p[1]) {
                    Some(l) => {
                        l.active = p[2] == 1;
                        vec![POSITIVE]
                    }
                    None => error(err::OUT_OF_RANGE),
                }
            }
            _ => unreachable!(),
        }
    }

    /// Samples the active lists due after `cycle` completed: a list with
    /// period `p` fires after cycles `p-1`, `2p-1`, and so on.
    pub fn daq_tick<T: CalibrationTarget + ?Sized>(&mut self, cycle: u64, target: &T) -> Vec<XcpFrame> {
        let mut out = Vec::new();
        for l in &self.daq {
            if !l.active || !(cycle + 1).is_multiple_of(l.period) {
                continue;
            }
            let mut payload = vec![l.id];
            for e in &l.entries {
                match target.read(e.addr, e.len as usize) {
                    Some(b) => payload.extend(b),
                    None => payload.extend(std::iter::repeat_n(0, e.len as usize)),
                }
            }
            out.push(XcpFrame { ctr: self.daq_ctr, payload });
            self.daq_ctr = self.daq_ctr.wrapping_add(1);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum TransportKind {
    JtagLike,
    UsbLike,
}

impl TransportKind {
    /// Default one-way latency in nanoseconds.
    pub fn default_latency_ns(self) -> u64 {
        match self {
            TransportKind::JtagLike => 2_000,
            TransportKind::UsbLike => 3_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("channel closed")]
    Closed,
    #[error("malformed frame on channel: {0}")]
    Frame(#[from] XcpFrameError),
    #[error("response counter {got} does not match request {sent}")]
    Counter { sent: u16, got: u16 },
    #[error("one-way latency must be positive")]
    ZeroLatency,
    #[error("i/o: {0}")]
    Io(alloc::string::String),
}

/// Byte channel carrying encoded frames.
pub trait Channel {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError>;
}

/// A latency-modeled transport. Simulated time is an accounting ledger
/// independent of wall-clock time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transport {
    kind: TransportKind,
    one_way_ns: u64,
    elapsed_ns: u64,
}

impl Transport {
    pub fn new(kind: TransportKind, one_way_ns: u64) -> Result<Self, TransportError> {
        if one_way_ns == 0 {
            return Err(TransportError::ZeroLatency);
        }
        Ok(Transport { kind, one_way_ns, elapsed_ns: 0 })
    }

    pub fn with_default_latency(kind: TransportKind) -> Self {
        Transport { kind, one_way_ns: kind.default_latency_ns(), elapsed_ns: 0 }
    }

    pub fn kind(&self) -> TransportKind {
        self.kind
    }

    pub fn one_way_ns(&self) -> u64 {
        self.one_way_ns
    }

    /// Total simulated time spent on completed round trips.
    pub fn elapsed_ns(&self) -> u64 {
        self.elapsed_ns
    }

    /// Sends a request and waits for its response; returns the response and
    /// the simulated round-trip time (service time counts as zero).
    pub fn roundtrip<C: Channel + ?Sized>(&mut self, req: &XcpFrame, channel: &mut C) -> Result<(XcpFrame, u64), TransportError> {
        let bytes = channel.exchange(&req.encode()?)?;
        let (resp, _) = XcpFrame::decode(&bytes)?;
        if resp.ctr != req.ctr {
            return Err(TransportError::Counter { sent: req.ctr, got: resp.ctr });
        }
        let t = 2 * self.one_way_ns;
        self.elapsed_ns += t;
        Ok((resp, t))
    }
}

/// In-process channel straight into a server and its target.
pub struct LocalChannel<'a, T: CalibrationTarget + ?Sized> {
    pub server: &'a mut XcpServer,
    pub target: &'a mut T,
}

impl<T: CalibrationTarget + ?Sized> Channel for LocalChannel<'_, T> {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        let (req, _) = XcpFrame::decode(request)?;
        Ok(self.server.serve(&req, self.target).encode()?)
    }
}
