//! A debug session: one device, its debug fabric, and the run-control state machine.

use std::path::Path;

use mcds_core::codec::{self, TraceMessage};
use mcds_core::machine::{CoreMode, Fault};
use mcds_core::soc::{DebugSoc, SocError, StopReason, TickReport};
use mcds_core::xcp::{cmd, err, XcpFrame, XcpServer, ERROR, POSITIVE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Addr, ConfigError, SessionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Idle,
    Running,
    Broken,
    Done,
}

/// Run-control commands, shared by the CLI shell and `POST /api/control`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    /// Start from IDLE; runs at most `cycles` (default: the config's limit).
    Run {
        #[serde(default)]
        cycles: Option<u64>,
    },
    /// Break every running core.
    Halt,
    Resume {
        #[serde(default)]
        cycles: Option<u64>,
    },
    /// Run exactly `cycles` more cycles, then stop in BROKEN.
    Step {
        cycles: u64,
    },
    SetPin {
        pin: u8,
        level: bool,
    },
    Swbreak {
        addr: Addr,
        on: bool,
    },
    Page {
        page: u8,
    },
    /// Target reset. Trace and emulation memory are kept.
    Reset,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Run { .. } => "run",
            Command::Halt => "halt",
            Command::Resume { .. } => "resume",
            Command::Step { .. } => "step",
            Command::SetPin { .. } => "set_pin",
            Command::Swbreak { .. } => "swbreak",
            Command::Page { .. } => "page",
            Command::Reset => "reset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("`{cmd}` is not allowed in phase {phase:?}")]
    Phase { cmd: &'static str, phase: Phase },
    #[error(transparent)]
    Soc(#[from] SocError),
    #[error("calibration request rejected: {0}")]
    Xcp(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreView {
    pub id: u8,
    pub mode: CoreMode,
    pub pc: u32,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaView {
    pub active: bool,
    pub suspended: bool,
    pub remaining: u32,
}

/// A consistent snapshot, taken between commands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: Phase,
    pub cycle: u64,
    pub cores: Vec<CoreView>,
    pub dma: DmaView,
    pub trace_messages: usize,
    pub trace_bytes: usize,
    pub page: u8,
    pub pins: Vec<bool>,
    pub sw_breaks: Vec<u32>,
    pub stop: Option<StopReason>,
    pub daq_frames: u64,
    pub clients: usize,
}

/// What one slice of execution produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Progress {
    pub messages: Vec<TraceMessage>,
    pub daq: Vec<XcpFrame>,
}

#[derive(Debug)]
pub struct Session {
    soc: DebugSoc,
    daq: XcpServer,
    cal: XcpServer,
    phase: Phase,
    budget: u64,
    max_cycles: u64,
    stop: Option<StopReason>,
    trace_bytes: usize,
    daq_frames: u64,
    xcp_ctr: u16,
    jtag_latency_ns: u64,
    usb_latency_ns: u64,
}

/// Upper bound on the cycles a halt waits for in-flight bus transactions.
const HALT_DRAIN: u64 = 64;

impl Session {
    pub fn new(config: &SessionConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        let b = config.build(base_dir)?;
        let mut s = Session {
            soc: b.soc,
            daq: b.xcp,
            cal: XcpServer::default(),
            phase: Phase::Idle,
            budget: 0,
            max_cycles: b.max_cycles,
            stop: None,
            trace_bytes: 0,
            daq_frames: 0,
            xcp_ctr: 0,
            jtag_latency_ns: b.jtag_latency_ns,
            usb_latency_ns: b.usb_latency_ns,
        };
        s.cal.serve(&XcpFrame::new(0, vec![cmd::CONNECT]), s.soc.machine_mut());
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let (cfg, dir) = SessionConfig::load(path)?;
        Session::new(&cfg, &dir)
    }

    pub fn soc(&self) -> &DebugSoc {
        &self.soc
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn max_cycles(&self) -> u64 {
        self.max_cycles
    }

    pub fn latencies_ns(&self) -> (u64, u64) {
        (self.jtag_latency_ns, self.usb_latency_ns)
    }

    pub fn trace(&self) -> &[TraceMessage] {
        self.soc.trace()
    }

    pub fn state(&self) -> SessionState {
        let m = self.soc.machine();
        SessionState {
            phase: self.phase,
            cycle: m.cycle(),
            cores: m
                .cores()
                .iter()
                .map(|c| CoreView { id: c.id.0, mode: c.mode, pc: c.pc, fault: c.fault.map(|f: Fault| format!("{f:?}")) })
                .collect(),
            dma: DmaView { active: m.dma().active, suspended: m.dma().suspended, remaining: m.dma().remaining },
            trace_messages: self.soc.trace().len(),
            trace_bytes: self.trace_bytes,
            page: m.emu().cal_page(),
            pins: self.soc.pins().to_vec(),
            sw_breaks: self.soc.sw_breaks().collect(),
            stop: self.stop,
            daq_frames: self.daq_frames,
            clients: 0,
        }
    }

    fn require(&self, c: &Command, allowed: &[Phase]) -> Result<(), ControlError> {
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(ControlError::Phase { cmd: c.name(), phase: self.phase })
        }
    }

    /// Applies a command. Commands that run the target only enter RUNNING;
    /// [`advance`](Self::advance) does the work. Returns messages committed
    /// by the command itself (halt and reset close the open streams).
    pub fn control(&mut self, c: &Command) -> Result<Vec<TraceMessage>, ControlError> {
        use Phase::*;
        let mut out = Vec::new();
        match *c {
            Command::Run { cycles } => {
                self.require(c, &[Idle])?;
                self.start(cycles.unwrap_or(self.max_cycles));
            }
            Command::Resume { cycles } => {
                self.require(c, &[Broken])?;
                self.soc.resume();
                self.start(cycles.unwrap_or(self.max_cycles));
            }
            Command::Step { cycles } => {
                self.require(c, &[Idle, Broken])?;
                if self.phase == Broken {
                    self.soc.resume();
                }
                self.start(cycles);
            }
            Command::Halt => {
                self.require(c, &[Idle, Running])?;
                self.soc.halt();
                let mut p = Progress::default();
                for _ in 0..HALT_DRAIN {
                    if !self.soc.machine().cores().iter().any(|c| c.mode == CoreMode::Running) {
                        break;
                    }
                    let r = self.soc.tick();
                    self.absorb(r, &mut p);
                }
                out = p.messages;
                self.phase = Broken;
                self.stop = Some(StopReason::Break);
                self.budget = 0;
                out.extend(self.commit_flush());
            }
            Command::SetPin { pin, level } => {
                self.soc.set_pin(pin, level)?;
            }
            Command::Swbreak { addr, on } => {
                self.require(c, &[Idle, Broken, Done])?;
                if on {
                    self.soc.set_sw_break(addr.0)?;
                } else {
                    self.soc.clear_sw_break(addr.0)?;
                }
            }
            Command::Page { page } => {
                self.calibration_page(page)?;
            }
            Command::Reset => {
                out = self.commit_flush();
                self.soc.reset();
                self.phase = Idle;
                self.budget = 0;
                self.stop = None;
            }
        }
        Ok(out)
    }

    fn start(&mut self, cycles: u64) {
        self.phase = Phase::Running;
        self.budget = cycles;
        self.stop = None;
    }

    fn absorb(&mut self, r: TickReport, p: &mut Progress) {
        let frames = self.daq.daq_tick(r.events.cycle, self.soc.machine());
        self.daq_frames += frames.len() as u64;
        p.daq.extend(frames);
        self.trace_bytes += codec::serialize(&r.messages).len();
        p.messages.extend(r.messages);
    }

    fn commit_flush(&mut self) -> Vec<TraceMessage> {
        let m = self.soc.flush();
        self.trace_bytes += codec::serialize(&m).len();
        m
    }

    /// Runs up to `max_ticks` cycles of the current RUNNING command. When the
    /// command finishes the phase moves to BROKEN or DONE and the open
    /// program streams are closed.
    pub fn advance(&mut self, max_ticks: u64) -> Progress {
        let mut p = Progress::default();
        if self.phase != Phase::Running {
            return p;
        }
        let n = max_ticks.min(self.budget);
        let mut reason = StopReason::Limit;
        for _ in 0..n {
            let mut rep = None;
            reason = self.soc.run_with(1, |r| rep = Some(r));
            if let Some(r) = rep {
                self.budget -= 1;
                self.absorb(r, &mut p);
            }
            if reason != StopReason::Limit {
                break;
            }
        }
        let finished = match reason {
            StopReason::Break => Some(Phase::Broken),
            StopReason::Quiescent => Some(Phase::Done),
            StopReason::Limit if self.budget == 0 => Some(Phase::Broken),
            StopReason::Limit => None,
        };
        if let Some(phase) = finished {
            self.phase = phase;
            self.stop = Some(reason);
            self.budget = 0;
            p.messages.extend(self.commit_flush());
        }
        p
    }

    /// Applies a command and, if it runs the target, runs it to completion.
    pub fn execute(&mut self, c: &Command) -> Result<Progress, ControlError> {
        let mut p = Progress { messages: self.control(c)?, daq: Vec::new() };
        while self.phase == Phase::Running {
            let more = self.advance(u64::MAX);
            p.messages.extend(more.messages);
            p.daq.extend(more.daq);
        }
        Ok(p)
    }

    /// Serves a request arriving on an external XCP transport.
    pub fn xcp(&mut self, req: &XcpFrame) -> XcpFrame {
        self.daq.serve(req, self.soc.machine_mut())
    }

    fn cal_request(&mut self, payload: Vec<u8>) -> Result<Vec<u8>, ControlError> {
        self.xcp_ctr = self.xcp_ctr.wrapping_add(1);
        let resp = self.cal.serve(&XcpFrame::new(self.xcp_ctr, payload), self.soc.machine_mut());
        match resp.payload.as_slice() {
            [POSITIVE, rest @ ..] => Ok(rest.to_vec()),
            [ERROR, code, ..] => Err(ControlError::Xcp(match *code {
                err::OUT_OF_RANGE => "address or page out of range",
                err::CMD_SYNTAX => "malformed request",
                err::SEQUENCE => "not connected",
                _ => "unknown command",
            })),
            _ => Err(ControlError::Xcp("malformed response")),
        }
    }

    /// DOWNLOAD through the calibration protocol.
    pub fn calibration_write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), ControlError> {
        if bytes.is_empty() || bytes.len() > u16::MAX as usize - 8 {
            return Err(ControlError::Xcp("malformed request"));
        }
        let mut p = vec![cmd::DOWNLOAD];
        p.extend(addr.to_le_bytes());
        p.extend(bytes);
        self.cal_request(p).map(|_| ())
    }

    /// SHORT_UPLOAD through the calibration protocol.
    pub fn calibration_read(&mut self, addr: u32, len: u8) -> Result<Vec<u8>, ControlError> {
        let mut p = vec![cmd::SHORT_UPLOAD];
        p.extend(addr.to_le_bytes());
        p.push(len);
        self.cal_request(p)
    }

    pub fn calibration_page(&mut self, page: u8) -> Result<(), ControlError> {
        self.cal_request(vec![cmd::SET_CAL_PAGE, page]).map(|_| ())
    }

    pub fn calibration_get_page(&mut self) -> Result<u8, ControlError> {
        let r = self.cal_request(vec![cmd::GET_CAL_PAGE])?;
        r.first().copied().ok_or(ControlError::Xcp("malformed response"))
    }
}
