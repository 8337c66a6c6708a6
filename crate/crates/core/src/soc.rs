//! The machine with its debug fabric attached: one trigger block per traced
//! master, the cross-trigger switch, trace compression, and timestamping.
//!
//! Actions raised by the events of cycle `t` are delivered at the end of
//! cycle `t + d`, before cycle `t + d + 1` starts. With actions disabled the
//! fabric only observes; the machine runs exactly as it would alone.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::codec::{self, DataEncoder, DataRecord, Payload, ProgramEncoder, TraceMessage, DEFAULT_SYNC_EVERY};
use crate::emu::SegmentRole;
use crate::isa::{BKPT_WORD, WORD};
use crate::machine::{ActionWarning, CoreMode, CycleEvents, Machine, MachineAction, MachineError, MasterId};
use crate::timestamp::{Stamper, TimestampConfig, TimestampConfigError};
use crate::trigger::{qualify, TriggerBlock, TriggerConfig, TriggerError, TRIGGER_LINES};
use crate::xtrig::{self, CrossTrigger, CrossTriggerConfig, CrossTriggerError, Destination, PendingAction, SwitchAction, TriggerSource};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BlockConfig {
    /// Master whose events this block traces.
    pub source: u8,
    #[cfg_attr(feature = "serde", serde(default))]
    pub trigger: TriggerConfig,
    /// Initial qualification state.
    #[cfg_attr(feature = "serde", serde(default = "yes"))]
    pub trace_enabled: bool,
    #[cfg_attr(feature = "serde", serde(default = "yes"))]
    pub program_trace: bool,
    #[cfg_attr(feature = "serde", serde(default = "yes"))]
    pub data_trace: bool,
}

#[cfg(feature = "serde")]
fn yes() -> bool {
    true
}

impl BlockConfig {
    pub fn tracing(source: u8) -> Self {
        BlockConfig { source, trigger: TriggerConfig::default(), trace_enabled: true, program_trace: true, data_trace: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DebugConfig {
    pub blocks: Vec<BlockConfig>,
    pub cross_trigger: CrossTriggerConfig,
    pub timestamp: TimestampConfig,
    pub sync_every: u32,
    /// When false, triggers are evaluated but never reach the switch.
    pub actions_enabled: bool,
}

impl Default for DebugConfig {
    fn default() -> Self {
        DebugConfig {
            blocks: Vec::new(),
            cross_trigger: CrossTriggerConfig::default(),
            timestamp: TimestampConfig::default(),
            sync_every: DEFAULT_SYNC_EVERY,
            actions_enabled: true,
        }
    }
}

impl DebugConfig {
    /// One tracing block per master, no triggers.
    pub fn trace_all(masters: usize) -> Self {
        DebugConfig { blocks: (0..masters as u8).map(BlockConfig::tracing).collect(), ..DebugConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DebugConfigError {
    #[error("block {block}: source {source_id} is not a bus master")]
    NoSuchSource { block: usize, source_id: u8 },
    #[error("block {block}: source {source_id} already has a block")]
    DuplicateSource { block: usize, source_id: u8 },
    #[error("block {block}: {error}")]
    Trigger { block: usize, error: TriggerError },
    #[error("cross trigger: {0}")]
    CrossTrigger(#[from] CrossTriggerError),
    #[error("timestamp: {0}")]
    Timestamp(#[from] TimestampConfigError),
    #[error("sync_every must be at least 1")]
    SyncEvery,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SocError {
    #[error("{0:#010x} does not resolve to emulation RAM; software breakpoints need RAM-resident code")]
    NotEmulationRam(u32),
    #[error("breakpoint address {0:#010x} is not word aligned")]
    Unaligned(u32),
    #[error("no software breakpoint at {0:#010x}")]
    NoBreakpoint(u32),
    #[error("input pin {0} does not exist")]
    NoSuchPin(u8),
    #[error(transparent)]
    Machine(#[from] MachineError),
}

/// A pulse driven on an external output pin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PinPulse {
    pub pin: u8,
    pub cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TickReport {
    pub events: CycleEvents,
    /// Messages committed during this tick; all belong to earlier cycles.
    pub messages: Vec<TraceMessage>,
    pub delivered: Vec<PendingAction>,
    pub pulses: Vec<PinPulse>,
    pub warnings: Vec<ActionWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum StopReason {
    /// A core entered HALTED_BREAK.
    Break,
    /// Nothing left to run.
    Quiescent,
    /// The cycle budget ran out.
    Limit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    config: BlockConfig,
    trigger: TriggerBlock,
    enabled: bool,
    program: ProgramEncoder,
    data: DataEncoder,
    stamper: Stamper,
}

impl Block {
    fn close(&mut self, cycle: u64, out: &mut Vec<TraceMessage>) {
        let mut payloads = Vec::new();
        self.program.close(&mut payloads);
        self.data.restart();
        for p in payloads {
            self.stamper.push(cycle, p, out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DebugSoc {
    machine: Machine,
    config: DebugConfig,
    blocks: Vec<Block>,
    xtrig: CrossTrigger,
    pins_in: [bool; xtrig::INPUT_PINS as usize],
    trace: Vec<TraceMessage>,
    staged: Vec<TraceMessage>,
    pulses: Vec<PinPulse>,
    warnings: Vec<ActionWarning>,
    sw_breaks: BTreeMap<u32, u32>,
}

impl DebugSoc {
    pub fn new(machine: Machine, mut config: DebugConfig) -> Result<Self, DebugConfigError> {
        let masters = machine.master_count();
        for (block, b) in config.blocks.iter().enumerate() {
            if b.source as usize >= masters {
                return Err(DebugConfigError::NoSuchSource { block, source_id: b.source });
            }
            if config.blocks[..block].iter().any(|o| o.source == b.source) {
                return Err(DebugConfigError::DuplicateSource { block, source_id: b.source });
            }
            b.trigger.validate().map_err(|error| DebugConfigError::Trigger { block, error })?;
        }
        config.cross_trigger.validate(config.blocks.len(), machine.config().cores)?;
        config.timestamp.validate()?;
        if config.sync_every == 0 {
            return Err(DebugConfigError::SyncEvery);
        }
        let mut order: Vec<usize> = (0..config.blocks.len()).collect();
        order.sort_by_key(|&i| config.blocks[i].source);
        let remap: Vec<usize> = {
            let mut r = vec![0; order.len()];
            for (new, &old) in order.iter().enumerate() {
                r[old] = new;
            }
            r
        };
        let blocks_sorted: Vec<BlockConfig> = order.iter().map(|&i| config.blocks[i].clone()).collect();
        for r in &mut config.cross_trigger.routes {
            match &mut r.source {
                TriggerSource::TrigOut { block, .. } | TriggerSource::BreakReq { block } | TriggerSource::SuspendReq { block } => {
                    *block = remap[*block]
                }
                TriggerSource::Pin(_) => {}
            }
        }
        config.blocks = blocks_sorted;
        let blocks = config
            .blocks
            .iter()
            .map(|b| Block {
                config: b.clone(),
                trigger: TriggerBlock::new(b.trigger.clone()).expect("validated"),
                enabled: b.trace_enabled,
                program: ProgramEncoder::new(config.sync_every),
                data: DataEncoder::new(config.sync_every),
                stamper: Stamper::new(b.source, config.timestamp),
            })
            .collect();
        Ok(DebugSoc {
            machine,
            xtrig: CrossTrigger::new(config.cross_trigger.clone()),
            config,
            blocks,
            pins_in: [false; xtrig::INPUT_PINS as usize],
            trace: Vec::new(),
            staged: Vec::new(),
            pulses: Vec::new(),
            warnings: Vec::new(),
            sw_breaks: BTreeMap::new(),
        })
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    /// Direct access for loading and the debug port. Not a target action.
    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn config(&self) -> &DebugConfig {
        &self.config
    }

    /// Every committed message, in merge order.
    pub fn trace(&self) -> &[TraceMessage] {
        &self.trace
    }

    pub fn pulses(&self) -> &[PinPulse] {
        &self.pulses
    }

    pub fn warnings(&self) -> &[ActionWarning] {
        &self.warnings
    }

    pub fn pending(&self) -> &[PendingAction] {
        self.xtrig.pending()
    }

    pub fn qualification(&self, source: u8) -> Option<bool> {
        self.blocks.iter().find(|b| b.config.source == source).map(|b| b.enabled)
    }

    pub fn set_pin(&mut self, pin: u8, level: bool) -> Result<(), SocError> {
        let slot = self.pins_in.get_mut(pin as usize).ok_or(SocError::NoSuchPin(pin))?;
        *slot = level;
        Ok(())
    }

    pub fn pins(&self) -> &[bool] {
        &self.pins_in
    }

    /// Stages new messages and commits, in merge order, every staged
    /// message older than `horizon`. Closing records of a cycle are only
    /// produced during the next one, so a cycle is final one tick later.
    fn record(&mut self, msgs: Vec<TraceMessage>, horizon: u64) -> Vec<TraceMessage> {
        self.staged.extend(msgs);
        self.staged.sort_by_key(|m| (m.cycle.unwrap_or(0), m.source, m.seq));
        let n = self.staged.partition_point(|m| m.cycle.unwrap_or(0) < horizon);
        let committed: Vec<TraceMessage> = self.staged.drain(..n).collect();
        if committed.is_empty() {
            return committed;
        }
        let emu = self.machine.emu();
        let has_trace = (0..emu.segment_count()).any(|s| emu.segment_role(s) == Some(SegmentRole::Trace));
        if has_trace {
            let bytes = codec::serialize(&committed);
            let _ = self.machine.emu_mut().trace_append(&bytes);
        }
        self.trace.extend_from_slice(&committed);
        committed
    }

    /// Advances one cycle.
    pub fn tick(&mut self) -> TickReport {
        let events = self.machine.tick();
        let cycle = events.cycle;
        let mut messages = Vec::new();
        let mut asserted = Vec::new();
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            let (_, actions) = b.trigger.step(&events);
            let was = b.enabled;
            let (enabled, q) = qualify(was, &actions, &events, MasterId(b.config.source));
            b.enabled = enabled;
            if was && !enabled {
                // the stream ended with the previous cycle
                b.close(cycle.saturating_sub(1), &mut messages);
            }
            let mut payloads = Vec::new();
            if q.mark {
                payloads.push(Payload::Mark { state: b.trigger.state().state });
            }
            if b.config.program_trace {
                for r in &q.retires {
                    b.program.on_retire(r, &mut payloads);
                }
            }
            if b.config.data_trace {
                for a in &q.data {
                    payloads.push(b.data.encode(&DataRecord::from(a)));
                }
            }
            for p in payloads {
                b.stamper.push(cycle, p, &mut messages);
            }
            for line in 0..TRIGGER_LINES {
                if actions.trigger_out >> line & 1 == 1 {
                    asserted.push(TriggerSource::TrigOut { block: bi, line });
                }
            }
            if actions.break_req {
                asserted.push(TriggerSource::BreakReq { block: bi });
            }
            if actions.suspend_req {
                asserted.push(TriggerSource::SuspendReq { block: bi });
            }
        }
        for (p, &high) in self.pins_in.iter().enumerate() {
            if high {
                asserted.push(TriggerSource::Pin(p as u8));
            }
        }
        if self.config.actions_enabled {
            let lines = self.xtrig.route(&asserted);
            self.xtrig.dispatch(lines, cycle);
        }
        let (delivered, pulses, warnings) = self.deliver(cycle);
        let messages = self.record(messages, cycle);
        TickReport { events, messages, delivered, pulses, warnings }
    }

    fn deliver(&mut self, cycle: u64) -> (Vec<PendingAction>, Vec<PinPulse>, Vec<ActionWarning>) {
        let due = self.xtrig.take_due(cycle);
        let mut pulses = Vec::new();
        let mut warnings = Vec::new();
        for p in &due {
            let r = match (p.dest, p.action) {
                (Destination::Core(i), SwitchAction::Break) => self.machine.apply(MachineAction::Break(i)),
                (Destination::Dma, SwitchAction::Suspend) => self.machine.apply(MachineAction::Suspend),
                (Destination::Pin(pin), SwitchAction::PulseOut) => {
                    pulses.push(PinPulse { pin, cycle: p.due });
                    Ok(())
                }
                _ => Ok(()),
            };
            if let Err(w) = r {
                warnings.push(w);
            }
        }
        self.pulses.extend_from_slice(&pulses);
        self.warnings.extend_from_slice(&warnings);
        (due, pulses, warnings)
    }

    /// Runs until a core breaks, nothing is left to run, or `max_cycles`
    /// cycles have passed.
    pub fn run(&mut self, max_cycles: u64) -> (StopReason, Vec<TickReport>) {
        let mut reports = Vec::new();
        let reason = self.run_with(max_cycles, |r| reports.push(r));
        (reason, reports)
    }

    pub fn run_with<F: FnMut(TickReport)>(&mut self, max_cycles: u64, mut sink: F) -> StopReason {
        if let Some(r) = self.stopped() {
            return r;
        }
        for _ in 0..max_cycles {
            sink(self.tick());
            if let Some(r) = self.stopped() {
                return r;
            }
        }
        StopReason::Limit
    }

    fn stopped(&self) -> Option<StopReason> {
        if self.machine.cores().iter().any(|c| c.mode == CoreMode::HaltedBreak) {
            Some(StopReason::Break)
        } else if self.machine.quiescent() {
            Some(StopReason::Quiescent)
        } else {
            None
        }
    }

    /// Closes every open program stream so the decoder knows where each
    /// source stopped, and commits everything still staged. Returns the
    /// newly committed messages.
    pub fn flush(&mut self) -> Vec<TraceMessage> {
        let cycle = self.machine.cycle().saturating_sub(1);
        let mut messages = Vec::new();
        for b in &mut self.blocks {
            b.close(cycle, &mut messages);
        }
        self.record(messages, u64::MAX)
    }

    /// Breaks every running core at the current cycle boundary.
    pub fn halt(&mut self) -> Vec<ActionWarning> {
        let mut warnings = Vec::new();
        for i in 0..self.machine.cores().len() {
            if self.machine.cores()[i].mode == CoreMode::Running {
                if let Err(w) = self.machine.apply(MachineAction::Break(i)) {
                    warnings.push(w);
                }
            }
        }
        warnings
    }

    /// Resumes broken cores and a suspended DMA engine. A core stopped on a
    /// software breakpoint executes the original instruction first.
    pub fn resume(&mut self) {
        self.xtrig.clear();
        for i in 0..self.machine.cores().len() {
            let c = &self.machine.cores()[i];
            if c.mode != CoreMode::HaltedBreak {
                continue;
            }
            if let Some(&orig) = self.sw_breaks.get(&c.pc) {
                let pc = c.pc;
                self.machine.set_fetch_override(i, pc, orig).expect("core exists");
            }
            let _ = self.machine.apply(MachineAction::ResumeCore(i));
        }
        if self.machine.dma().suspended {
            let _ = self.machine.apply(MachineAction::ResumeDma);
        }
    }

    /// Patches a breakpoint instruction at `addr`, which must resolve to
    /// emulation RAM.
    pub fn set_sw_break(&mut self, addr: u32) -> Result<(), SocError> {
        if !addr.is_multiple_of(WORD) {
            return Err(SocError::Unaligned(addr));
        }
        if !self.machine.resolves_to_emu(addr) {
            return Err(SocError::NotEmulationRam(addr));
        }
        if self.sw_breaks.contains_key(&addr) {
            return Ok(());
        }
        let b = self.machine.debug_read(addr, 4)?;
        let orig = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        self.machine.debug_write(addr, &BKPT_WORD.to_le_bytes())?;
        self.sw_breaks.insert(addr, orig);
        Ok(())
    }

    pub fn clear_sw_break(&mut self, addr: u32) -> Result<(), SocError> {
        let orig = self.sw_breaks.get(&addr).copied().ok_or(SocError::NoBreakpoint(addr))?;
        self.machine.debug_write(addr, &orig.to_le_bytes())?;
        self.sw_breaks.remove(&addr);
        Ok(())
    }

    pub fn sw_breaks(&self) -> impl Iterator<Item = u32> + '_ {
        self.sw_breaks.keys().copied()
    }

    /// Target reset: cores, RAM and DMA restart; flash, emulation memory and
    /// the recorded trace are kept. Trigger and encoder state restart.
    pub fn reset(&mut self) {
        self.flush();
        self.machine.reset();
        self.xtrig.clear();
        let sync_every = self.config.sync_every;
        for b in &mut self.blocks {
            b.trigger.reset();
            b.enabled = b.config.trace_enabled;
            b.program = ProgramEncoder::new(sync_every);
            b.data = DataEncoder::new(sync_every);
            let seq_base = b.stamper.next_seq();
            b.stamper = Stamper::new(b.config.source, self.config.timestamp);
            b.stamper.set_next_seq(seq_base);
        }
    }
}
