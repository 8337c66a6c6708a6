//! The simulated target: N cores and one DMA engine sharing a bus to flash,
//! RAM and the emulation memory.
//!
//! Timing model, per cycle:
//!
//! 1. Staged emulation-memory control writes take effect.
//! 2. Every idle running core fetches and decodes its next instruction.
//!    Memory instructions and the DMA raise a bus request.
//! 3. One request is granted, round-robin from the grant cursor.
//! 4. Masters execute in fixed order (core 0, core 1, ..., DMA). Non-memory
//!    instructions retire in their issue cycle. A granted transaction performs
//!    its access immediately and retires `latency` cycles later; a denied
//!    request retries next cycle.
//!
//! Instruction fetch does not use the shared bus. All accesses to a flash
//! address cost `flash_latency`, whether or not an overlay redirects them.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::emu::{self, EmuError, EmuRam, Route};
use crate::isa::{Instruction, Opcode, WORD};

pub const FLASH_BASE: u32 = 0x0000_0000;
pub const RAM_BASE: u32 = 0x2000_0000;
/// Direct window onto the emulation RAM, used for code, calibration pages and tooling.
pub const EMU_RAM_BASE: u32 = 0xE000_0000;
pub const EMU_CTRL_BASE: u32 = 0xF000_0000;
pub const EMU_CTRL_SIZE: u32 = 0x1000;

/// A bus master. Cores are `0..cores`, the DMA engine is `cores`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MasterId(pub u8);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineConfig {
    pub cores: usize,
    pub flash_size: usize,
    pub ram_size: usize,
    pub emu_size: usize,
    pub flash_latency: u32,
    pub ram_latency: u32,
    pub emu_latency: u32,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            cores: 1,
            flash_size: 2 * 1024 * 1024,
            ram_size: 64 * 1024,
            emu_size: emu::DEFAULT_SIZE,
            flash_latency: 2,
            ram_latency: 1,
            emu_latency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("invalid machine configuration: {0}")]
    Config(&'static str),
    #[error("address range {addr:#010x}+{len} is not mapped")]
    Unmapped { addr: u32, len: usize },
    #[error("address {0:#010x} is not writable through this port")]
    ReadOnly(u32),
    #[error("no core {0}")]
    NoSuchCore(usize),
    #[error(transparent)]
    Emu(#[from] EmuError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum CoreMode {
    Running,
    HaltedBreak,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Fault {
    FetchUnmapped(u32),
    Decode { pc: u32, word: u32 },
    DataUnmapped(u32),
    Misaligned(u32),
    ReadOnly(u32),
    BadBranch(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MemOp {
    pc: u32,
    insn: Instruction,
    addr: u32,
    write: bool,
    latency: u32,
    granted: bool,
    value: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreState {
    pub id: MasterId,
    pub regs: [u32; 16],
    pub pc: u32,
    pub mode: CoreMode,
    pub stall_cycles: u32,
    pub fault: Option<Fault>,
    entry: u32,
    mem: Option<MemOp>,
    issued: Option<(u32, Instruction)>,
    break_pending: bool,
    fetch_override: Option<(u32, u32)>,
}

impl CoreState {
    fn new(id: u8, entry: u32) -> Self {
        CoreState {
            id: MasterId(id),
            regs: [0; 16],
            pc: entry,
            mode: CoreMode::Running,
            stall_cycles: 0,
            fault: None,
            entry,
            mem: None,
            issued: None,
            break_pending: false,
            fetch_override: None,
        }
    }

    /// True while a bus transaction of this core is in flight.
    pub fn in_flight(&self) -> bool {
        self.mem.is_some_and(|m| m.granted)
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    fn write_reg(&mut self, r: u8, v: u32) {
        if r != 0 {
            self.regs[r as usize] = v;
        }
    }

    fn fault(&mut self, f: Fault) {
        self.fault = Some(f);
        self.mode = CoreMode::Done;
        self.mem = None;
        self.issued = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum DmaPhase {
    #[default]
    Read,
    Write,
}

/// Word-copy DMA engine: alternating read and write transactions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dma {
    pub src: u32,
    pub dst: u32,
    pub remaining: u32,
    pub active: bool,
    pub suspended: bool,
    pub fault: Option<Fault>,
    phase: DmaPhase,
    stall: u32,
    latch: u32,
    in_flight: bool,
}

impl Dma {
    pub fn in_flight(&self) -> bool {
        self.in_flight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Retire {
    pub source: MasterId,
    pub pc: u32,
    pub taken: bool,
    pub target: u32,
    pub cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DataAccess {
    pub source: MasterId,
    pub addr: u32,
    pub value: u32,
    pub size: u8,
    pub write: bool,
    pub cycle: u64,
}

/// Everything the target did in one cycle, as seen by the debug adaptation logic.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CycleEvents {
    pub cycle: u64,
    pub retires: Vec<Retire>,
    pub data: Vec<DataAccess>,
    pub grant: Option<MasterId>,
}

/// Run-control requests the debug fabric can apply between cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MachineAction {
    Break(usize),
    Suspend,
    ResumeCore(usize),
    ResumeDma,
}

/// Reason an action had no effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ActionWarning {
    CoreDone(usize),
    NoSuchCore(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Flash(usize),
    Ram(usize),
    Emu(usize),
    Ctrl(u32),
}

/// The simulated system-on-chip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Machine {
    config: MachineConfig,
    cores: Vec<CoreState>,
    dma: Dma,
    flash: Vec<u8>,
    ram: Vec<u8>,
    emu: EmuRam,
    cycle: u64,
    bus_grant: usize,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Result<Self, MachineError> {
        if config.cores == 0 || config.cores > 64 {
            return Err(MachineError::Config("core count must be 1..=64"));
        }
        if config.flash_latency == 0 || config.ram_latency == 0 || config.emu_latency == 0 {
            return Err(MachineError::Config("latencies must be at least one cycle"));
        }
        if config.flash_size as u64 > RAM_BASE as u64 || config.ram_size as u64 > (EMU_RAM_BASE - RAM_BASE) as u64 {
            return Err(MachineError::Config("memory region too large for the address map"));
        }
        let emu = EmuRam::new(config.emu_size)?;
        Ok(Machine {
            cores: (0..config.cores).map(|i| CoreState::new(i as u8, FLASH_BASE)).collect(),
            dma: Dma::default(),
            flash: vec![0; config.flash_size],
            ram: vec![0; config.ram_size],
            emu,
            cycle: 0,
            bus_grant: 0,
            config,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn cores(&self) -> &[CoreState] {
        &self.cores
    }

    pub fn core(&self, i: usize) -> Option<&CoreState> {
        self.cores.get(i)
    }

    pub fn dma(&self) -> &Dma {
        &self.dma
    }

    pub fn dma_id(&self) -> MasterId {
        MasterId(self.cores.len() as u8)
    }

    pub fn master_count(&self) -> usize {
        self.cores.len() + 1
    }

    pub fn bus_grant_cursor(&self) -> usize {
        self.bus_grant
    }

    pub fn emu(&self) -> &EmuRam {
        &self.emu
    }

    /// Emulation memory configuration access (segment roles, ranges, trace buffer).
    pub fn emu_mut(&mut self) -> &mut EmuRam {
        &mut self.emu
    }

    pub fn set_entry(&mut self, core: usize, pc: u32) -> Result<(), MachineError> {
        let c = self.cores.get_mut(core).ok_or(MachineError::NoSuchCore(core))?;
        c.entry = pc;
        c.pc = pc;
        Ok(())
    }

    /// Starts a DMA block copy of `words` words.
    pub fn start_dma(&mut self, src: u32, dst: u32, words: u32) {
        self.dma = Dma { src, dst, remaining: words, active: words > 0, ..Dma::default() };
    }

    /// True when no core is running and the DMA engine is idle.
    pub fn quiescent(&self) -> bool {
        self.cores.iter().all(|c| c.mode != CoreMode::Running) && !(self.dma.active && !self.dma.suspended)
    }

    /// Writes an image into any mapped region, including flash, without
    /// overlay translation. This is the programming path, not a bus access.
    pub fn load_image(&mut self, addr: u32, bytes: &[u8]) -> Result<(), MachineError> {
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr.wrapping_add(i as u32);
            match self.decode_region(a) {
                Some(Target::Flash(o)) => self.flash[o] = b,
                Some(Target::Ram(o)) => self.ram[o] = b,
                Some(Target::Emu(o)) => self.emu.write(o, &[b])?,
                _ => return Err(MachineError::Unmapped { addr, len: bytes.len() }),
            }
        }
        Ok(())
    }

    /// Region decode without overlay translation.
    fn decode_region(&self, addr: u32) -> Option<Target> {
        let a = addr as usize;
        if (addr as u64) < self.flash.len() as u64 {
            return Some(Target::Flash(a));
        }
        let in_window = |base: u32, len: usize| addr >= base && ((addr - base) as usize) < len;
        if in_window(RAM_BASE, self.ram.len()) {
            return Some(Target::Ram((addr - RAM_BASE) as usize));
        }
        if in_window(EMU_RAM_BASE, self.emu.size()) {
            return Some(Target::Emu((addr - EMU_RAM_BASE) as usize));
        }
        if in_window(EMU_CTRL_BASE, EMU_CTRL_SIZE as usize) {
            return Some(Target::Ctrl(addr - EMU_CTRL_BASE));
        }
        None
    }

    /// Full decode with overlay translation. `staged` selects the view at the
    /// next cycle boundary (debug port) instead of the current cycle's view.
    fn resolve(&self, addr: u32, staged: bool) -> Option<(Target, u32)> {
        match self.decode_region(addr)? {
            Target::Flash(_) => {
                let routed = if staged {
                    self.emu.translate_staged(addr, self.config.flash_latency)
                } else {
                    self.emu.translate(addr, self.config.flash_latency)
                };
                let t = match routed.target {
                    Route::Flash(a) => Target::Flash(a as usize),
                    Route::Emu(o) => Target::Emu(o as usize),
                };
                Some((t, routed.latency))
            }
            t @ Target::Ram(_) => Some((t, self.config.ram_latency)),
            t @ Target::Emu(_) => Some((t, self.config.emu_latency)),
            t @ Target::Ctrl(_) => Some((t, 1)),
        }
    }

    fn read_word_at(&self, t: Target) -> Result<u32, MachineError> {
        let le = |s: &[u8], o: usize| u32::from_le_bytes([s[o], s[o + 1], s[o + 2], s[o + 3]]);
        Ok(match t {
            Target::Flash(o) => le(&self.flash, o),
            Target::Ram(o) => le(&self.ram, o),
            Target::Emu(o) => self.emu.read_u32(o)?,
            Target::Ctrl(o) => self.emu.reg_read(o)?,
        })
    }

    fn write_word_at(&mut self, t: Target, addr: u32, v: u32) -> Result<(), MachineError> {
        match t {
            Target::Flash(_) => return Err(MachineError::ReadOnly(addr)),
            Target::Ram(o) => self.ram[o..o + 4].copy_from_slice(&v.to_le_bytes()),
            Target::Emu(o) => self.emu.write(o, &v.to_le_bytes())?,
            Target::Ctrl(o) => self.emu.reg_write(o, v)?,
        }
        Ok(())
    }

    fn fetch(&self, pc: u32) -> Result<u32, Fault> {
        if !pc.is_multiple_of(WORD) {
            return Err(Fault::Misaligned(pc));
        }
        match self.resolve(pc, false) {
            Some((t @ (Target::Flash(_) | Target::Ram(_) | Target::Emu(_)), _)) => {
                self.read_word_at(t).map_err(|_| Fault::FetchUnmapped(pc))
            }
            _ => Err(Fault::FetchUnmapped(pc)),
        }
    }

    /// Validates a data access for the current cycle and returns its latency.
    fn check_data(&self, addr: u32, write: bool) -> Result<u32, Fault> {
        if !addr.is_multiple_of(WORD) {
            return Err(Fault::Misaligned(addr));
        }
        match self.resolve(addr, false) {
            None => Err(Fault::DataUnmapped(addr)),
            Some((Target::Flash(_), _)) if write => Err(Fault::ReadOnly(addr)),
            Some((_, lat)) => Ok(lat),
        }
    }

    fn bus_read(&self, addr: u32) -> Result<u32, Fault> {
        let (t, _) = self.resolve(addr, false).ok_or(Fault::DataUnmapped(addr))?;
        self.read_word_at(t).map_err(|_| Fault::DataUnmapped(addr))
    }

    fn bus_write(&mut self, addr: u32, v: u32) -> Result<(), Fault> {
        let (t, _) = self.resolve(addr, false).ok_or(Fault::DataUnmapped(addr))?;
        self.write_word_at(t, addr, v).map_err(|_| Fault::ReadOnly(addr))
    }

    /// Advances one cycle.
    pub fn tick(&mut self) -> CycleEvents {
        self.emu.begin_cycle();
        let cycle = self.cycle;
        let mut ev = CycleEvents { cycle, ..CycleEvents::default() };
        let n = self.cores.len();

        // issue: fetch/decode for idle cores, collect bus requests
        let mut requests = vec![false; n + 1];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let core = &self.cores[i];
            if core.mode != CoreMode::Running || core.stall_cycles > 0 {
                continue;
            }
            if let Some(m) = core.mem {
                requests[i] = !m.granted;
                continue;
            }
            let pc = core.pc;
            let word = match core.fetch_override {
                Some((at, w)) if at == pc => Ok(w),
                _ => self.fetch(pc),
            };
            let outcome = word.and_then(|w| Instruction::decode(w).map_err(|_| Fault::Decode { pc, word: w }));
            let core = &mut self.cores[i];
            core.fetch_override = None;
            match outcome {
                Err(f) => core.fault(f),
                Ok(insn) if insn.opcode.is_memory() => {
                    let addr = core.regs[insn.ra as usize].wrapping_add(insn.simm() as u32);
                    let write = insn.opcode == Opcode::St;
                    let value = if write { core.regs[insn.rd as usize] } else { 0 };
                    match self.check_data(addr, write) {
                        Ok(latency) => {
                            let core = &mut self.cores[i];
                            core.mem = Some(MemOp { pc, insn, addr, write, latency, granted: false, value });
                            requests[i] = true;
                        }
                        Err(f) => self.cores[i].fault(f),
                    }
                }
                Ok(insn) => core.issued = Some((pc, insn)),
            }
        }
        let dma = &self.dma;
        requests[n] = dma.active && !dma.suspended && !dma.in_flight;

        // arbitrate
        let masters = n + 1;
        let winner = (0..masters).map(|k| (self.bus_grant + k) % masters).find(|&m| requests[m]);
        if let Some(w) = winner {
            self.bus_grant = (w + 1) % masters;
            ev.grant = Some(MasterId(w as u8));
        }

        // execute
        for i in 0..n {
            self.exec_core(i, winner == Some(i), &mut ev);
        }
        self.exec_dma(winner == Some(n), &mut ev);

        self.cycle += 1;
        ev
    }

    fn exec_core(&mut self, i: usize, granted: bool, ev: &mut CycleEvents) {
        let cycle = self.cycle;
        if self.cores[i].mode != CoreMode::Running {
            return;
        }
        let id = self.cores[i].id;

        if self.cores[i].stall_cycles > 0 {
            let core = &mut self.cores[i];
            core.stall_cycles -= 1;
            if core.stall_cycles == 0 {
                let m = core.mem.take().expect("stall without transaction");
                if !m.write {
                    core.write_reg(m.insn.rd, m.value);
                }
                ev.data.push(DataAccess { source: id, addr: m.addr, value: m.value, size: 4, write: m.write, cycle });
                ev.retires.push(Retire { source: id, pc: m.pc, taken: false, target: m.pc + WORD, cycle });
                core.pc = m.pc + WORD;
                if core.break_pending {
                    core.break_pending = false;
                    core.mode = CoreMode::HaltedBreak;
                }
            }
            return;
        }

        if let Some(m) = self.cores[i].mem {
            if !granted {
                return;
            }
            let result = if m.write { self.bus_write(m.addr, m.value).map(|_| m.value) } else { self.bus_read(m.addr) };
            let core = &mut self.cores[i];
            match result {
                Ok(v) => {
                    core.mem = Some(MemOp { granted: true, value: v, ..m });
                    core.stall_cycles = m.latency;
                }
                Err(f) => core.fault(f),
            }
            return;
        }

        let Some((pc, insn)) = self.cores[i].issued.take() else { return };
        let core = &mut self.cores[i];
        let r = |x: u8| core.regs[x as usize];
        let mut next = pc.wrapping_add(WORD);
        let mut taken = false;
        match insn.opcode {
            Opcode::Nop => {}
            Opcode::Ldi => {
                let v = if insn.ra & 1 == 1 { (insn.imm16 as u32) << 16 } else { insn.imm16 as u32 };
                core.write_reg(insn.rd, v);
            }
            Opcode::Add => {
                let v = r(insn.ra).wrapping_add(r(insn.rb()));
                core.write_reg(insn.rd, v);
            }
            Opcode::Sub => {
                let v = r(insn.ra).wrapping_sub(r(insn.rb()));
                core.write_reg(insn.rd, v);
            }
            Opcode::Beq | Opcode::Bne | Opcode::Jmp => {
                taken = match insn.opcode {
                    Opcode::Beq => r(insn.rd) == r(insn.ra),
                    Opcode::Bne => r(insn.rd) != r(insn.ra),
                    _ => true,
                };
                if taken {
                    next = insn.branch_target(pc);
                    if next % WORD != 0 {
                        core.fault(Fault::BadBranch(next));
                        return;
                    }
                }
            }
            Opcode::Halt if insn.is_bkpt() => {
                core.mode = CoreMode::HaltedBreak;
                return;
            }
            Opcode::Halt => {
                ev.retires.push(Retire { source: core.id, pc, taken: false, target: next, cycle });
                core.pc = next;
                core.mode = CoreMode::Done;
                return;
            }
            Opcode::Ld | Opcode::St => unreachable!("memory operations issue through the bus"),
        }
        ev.retires.push(Retire { source: core.id, pc, taken, target: next, cycle });
        core.pc = next;
        if core.break_pending {
            core.break_pending = false;
            core.mode = CoreMode::HaltedBreak;
        }
    }

    fn exec_dma(&mut self, granted: bool, ev: &mut CycleEvents) {
        let cycle = self.cycle;
        let source = self.dma_id();
        if self.dma.in_flight {
            self.dma.stall -= 1;
            if self.dma.stall == 0 {
                let d = &mut self.dma;
                d.in_flight = false;
                match d.phase {
                    DmaPhase::Read => {
                        ev.data.push(DataAccess { source, addr: d.src, value: d.latch, size: 4, write: false, cycle });
                        d.phase = DmaPhase::Write;
                    }
                    DmaPhase::Write => {
                        ev.data.push(DataAccess { source, addr: d.dst, value: d.latch, size: 4, write: true, cycle });
                        d.phase = DmaPhase::Read;
                        d.src = d.src.wrapping_add(WORD);
                        d.dst = d.dst.wrapping_add(WORD);
                        d.remaining -= 1;
                        d.active = d.remaining > 0;
                    }
                }
            }
            return;
        }
        if !granted {
            return;
        }
        let (addr, write) = match self.dma.phase {
            DmaPhase::Read => (self.dma.src, false),
            DmaPhase::Write => (self.dma.dst, true),
        };
        let result = self.check_data(addr, write).and_then(|lat| {
            if write {
                self.bus_write(addr, self.dma.latch).map(|_| (lat, self.dma.latch))
            } else {
                self.bus_read(addr).map(|v| (lat, v))
            }
        });
        match result {
            Ok((lat, v)) => {
                self.dma.latch = v;
                self.dma.stall = lat;
                self.dma.in_flight = true;
            }
            Err(f) => {
                self.dma.fault = Some(f);
                self.dma.active = false;
            }
        }
    }

    /// Runs `n` cycles. After each cycle, `feed` sees its events and returns
    /// run-control actions applied before the next cycle starts.
    pub fn step<F>(&mut self, n: u64, mut feed: F) -> Vec<CycleEvents>
    where
        F: FnMut(&CycleEvents) -> Vec<MachineAction>,
    {
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let ev = self.tick();
            for a in feed(&ev) {
                let _ = self.apply(a);
            }
            out.push(ev);
        }
        out
    }

    /// Applies a run-control action at the current cycle boundary.
    ///
    /// A break lets an in-flight transaction retire first, so the core always
    /// halts on an instruction boundary with `pc` at the next un-retired
    /// instruction. A not-yet-granted request is simply dropped and re-fetched
    /// on resume.
    pub fn apply(&mut self, action: MachineAction) -> Result<(), ActionWarning> {
        match action {
            MachineAction::Break(i) => {
                let core = self.cores.get_mut(i).ok_or(ActionWarning::NoSuchCore(i))?;
                match core.mode {
                    CoreMode::Done => return Err(ActionWarning::CoreDone(i)),
                    CoreMode::HaltedBreak => {}
                    CoreMode::Running => {
                        if core.in_flight() {
                            core.break_pending = true;
                        } else {
                            core.mem = None;
                            core.issued = None;
                            core.mode = CoreMode::HaltedBreak;
                        }
                    }
                }
            }
            MachineAction::ResumeCore(i) => {
                let core = self.cores.get_mut(i).ok_or(ActionWarning::NoSuchCore(i))?;
                match core.mode {
                    CoreMode::Done => return Err(ActionWarning::CoreDone(i)),
                    CoreMode::HaltedBreak => core.mode = CoreMode::Running,
                    CoreMode::Running => core.break_pending = false,
                }
            }
            MachineAction::Suspend => self.dma.suspended = true,
            MachineAction::ResumeDma => self.dma.suspended = false,
        }
        Ok(())
    }

    /// Makes the next fetch at `pc` of a core return `word` instead of memory
    /// contents. Used to step over a patched software breakpoint.
    pub fn set_fetch_override(&mut self, core: usize, pc: u32, word: u32) -> Result<(), MachineError> {
        let c = self.cores.get_mut(core).ok_or(MachineError::NoSuchCore(core))?;
        c.fetch_override = Some((pc, word));
        Ok(())
    }

    /// Resets cores, RAM, DMA and the cycle counter. Flash and the emulation
    /// memory (separately powered) keep their contents and configuration.
    pub fn reset(&mut self) {
        for c in &mut self.cores {
            *c = CoreState::new(c.id.0, c.entry);
        }
        self.dma = Dma::default();
        self.ram.iter_mut().for_each(|b| *b = 0);
        self.cycle = 0;
        self.bus_grant = 0;
    }

    /// Reads through the dedicated debug port. Consumes no target cycles and
    /// never competes for the bus. The range must be mapped in full.
    pub fn debug_read(&self, addr: u32, len: usize) -> Result<Vec<u8>, MachineError> {
        let unmapped = MachineError::Unmapped { addr, len };
        if addr as u64 + len as u64 > 1 << 32 {
            return Err(unmapped);
        }
        let mut out = Vec::with_capacity(len);
        for i in 0..len as u32 {
            let a = addr + i;
            let b = match self.resolve(a, true).ok_or_else(|| unmapped.clone())?.0 {
                Target::Flash(o) => self.flash[o],
                Target::Ram(o) => self.ram[o],
                Target::Emu(o) => {
                    let mut b = [0u8];
                    self.emu.read(o, &mut b)?;
                    b[0]
                }
                Target::Ctrl(o) => self.emu.reg_read(o & !3)?.to_le_bytes()[(o & 3) as usize],
            };
            out.push(b);
        }
        Ok(out)
    }

    /// Writes through the debug port. Nothing is written unless the whole
    /// range is writable. Plain flash is read-only here; overlaid flash
    /// addresses write the selected calibration page.
    pub fn debug_write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), MachineError> {
        let len = bytes.len();
        if addr as u64 + len as u64 > 1 << 32 {
            return Err(MachineError::Unmapped { addr, len });
        }
        let mut targets = Vec::with_capacity(len);
        for i in 0..len as u32 {
            let a = addr + i;
            let (t, _) = self.resolve(a, true).ok_or(MachineError::Unmapped { addr, len })?;
            match t {
                Target::Flash(_) => return Err(MachineError::ReadOnly(a)),
                Target::Ctrl(o) if o % 4 != 0 || !len.is_multiple_of(4) || !addr.is_multiple_of(4) => {
                    return Err(MachineError::Emu(EmuError::Unaligned(o)))
                }
                _ => {}
            }
            targets.push(t);
        }
        let mut i = 0;
        while i < len {
            match targets[i] {
                Target::Ram(o) => self.ram[o] = bytes[i],
                Target::Emu(o) => self.emu.write(o, &bytes[i..i + 1])?,
                Target::Ctrl(o) => {
                    let v = u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
                    self.emu.reg_write(o, v)?;
                    i += 4;
                    continue;
                }
                Target::Flash(_) => unreachable!(),
            }
            i += 1;
        }
        Ok(())
    }

    /// Whether `addr` currently resolves into emulation RAM (directly or through an overlay).
    pub fn resolves_to_emu(&self, addr: u32) -> bool {
        matches!(self.resolve(addr, true), Some((Target::Emu(_), _)))
    }
}
