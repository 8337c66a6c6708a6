//! Seeded random programs and an architectural reference interpreter.
//!
//! The interpreter decodes instruction words on its own and ignores timing,
//! so it can serve as an oracle for the cycle-level simulator's retire and
//! data streams.

use std::collections::HashMap;
use std::fmt::Write as _;

use mcds_core::asm::assemble;
use mcds_core::machine::{Machine, MachineConfig, RAM_BASE};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub segments: std::ops::RangeInclusive<usize>,
    pub straight_len: std::ops::RangeInclusive<usize>,
    pub loop_iters: std::ops::RangeInclusive<u32>,
    pub memory_ops: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { segments: 1..=8, straight_len: 1..=12, loop_iters: 1..=20, memory_ops: true }
    }
}

/// Private RAM window of core `core` used by generated programs.
pub fn data_window(core: usize) -> u32 {
    RAM_BASE + 0x400 * core as u32
}

/// Assembly for a terminating random program. Registers R13..R15 are
/// reserved (data base, constant 1, loop counter).
pub fn random_source(rng: &mut impl Rng, core: usize, opts: &GenOptions) -> String {
    let mut s = String::new();
    let mut label = 0usize;
    writeln!(s, "    LDI R14, 1").unwrap();
    writeln!(s, "    LUI R13, {:#x}", RAM_BASE >> 16).unwrap();
    writeln!(s, "    LDI R12, {:#x}", 0x400 * core).unwrap();
    writeln!(s, "    ADD R13, R13, R12").unwrap();
    let segments = rng.gen_range(opts.segments.clone());
    for _ in 0..segments {
        if rng.gen_bool(0.5) {
            straight(rng, &mut s, &mut label, opts);
        } else {
            let n = rng.gen_range(opts.loop_iters.clone());
            let top = label;
            label += 1;
            writeln!(s, "    LDI R15, {n}").unwrap();
            writeln!(s, "L{top}:").unwrap();
            straight(rng, &mut s, &mut label, opts);
            writeln!(s, "    SUB R15, R15, R14").unwrap();
            writeln!(s, "    BNE R15, R0, L{top}").unwrap();
        }
    }
    writeln!(s, "    HALT").unwrap();
    s
}

fn reg(rng: &mut impl Rng) -> u8 {
    rng.gen_range(1..=11)
}

fn straight(rng: &mut impl Rng, s: &mut String, label: &mut usize, opts: &GenOptions) {
    let len = rng.gen_range(opts.straight_len.clone());
    let mut open: Vec<(usize, usize)> = Vec::new();
    for i in 0..len {
        open.retain(|&(at, l)| {
            if at == i {
                writeln!(s, "L{l}:").unwrap();
                false
            } else {
                true
            }
        });
        let pick = rng.gen_range(0..if opts.memory_ops { 10 } else { 7 });
        match pick {
            0 => writeln!(s, "    NOP").unwrap(),
            1 | 2 => writeln!(s, "    LDI R{}, {}", reg(rng), rng.gen_range(0..0x100)).unwrap(),
            3 => writeln!(s, "    ADD R{}, R{}, R{}", reg(rng), reg(rng), reg(rng)).unwrap(),
            4 => writeln!(s, "    SUB R{}, R{}, R{}", reg(rng), reg(rng), reg(rng)).unwrap(),
            5 | 6 => {
                let l = *label;
                *label += 1;
                let at = rng.gen_range(i + 1..=len);
                open.push((at, l));
                match rng.gen_range(0..3) {
                    0 => writeln!(s, "    JMP L{l}").unwrap(),
                    1 => writeln!(s, "    BEQ R{}, R{}, L{l}", reg(rng), reg(rng)).unwrap(),
                    _ => writeln!(s, "    BNE R{}, R{}, L{l}", reg(rng), reg(rng)).unwrap(),
                }
            }
            7 | 8 => writeln!(s, "    ST R{}, [R13+{}]", reg(rng), 4 * rng.gen_range(0..16)).unwrap(),
            _ => writeln!(s, "    LD R{}, [R13+{}]", reg(rng), 4 * rng.gen_range(0..16)).unwrap(),
        }
    }
    for (_, l) in open {
        writeln!(s, "L{l}:").unwrap();
    }
}

/// A multi-master workload: one program per core plus an optional DMA copy.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub images: Vec<(u32, Vec<u8>)>,
    pub dma: Option<(u32, u32, u32)>,
}

pub const CODE_STRIDE: u32 = 0x4000;
pub const DMA_SRC: u32 = RAM_BASE + 0x8000;
pub const DMA_DST: u32 = RAM_BASE + 0x9000;

impl Scenario {
    pub fn random(seed: u64, cores: usize, dma: bool, opts: &GenOptions) -> Self {
        let mut r = rng(seed);
        let images = (0..cores)
            .map(|c| {
                let base = CODE_STRIDE * c as u32;
                let src = random_source(&mut r, c, opts);
                (base, assemble(&src, base).expect("generated program assembles").bytes)
            })
            .collect();
        let dma = dma.then(|| (DMA_SRC, DMA_DST, r.gen_range(1..=64)));
        Scenario { images, dma }
    }

    pub fn machine(&self, config: MachineConfig) -> Machine {
        let mut m = Machine::new(MachineConfig { cores: self.images.len(), ..config }).unwrap();
        for (i, (base, bytes)) in self.images.iter().enumerate() {
            m.load_image(*base, bytes).unwrap();
            m.set_entry(i, *base).unwrap();
        }
        if let Some((src, dst, words)) = self.dma {
            let fill: Vec<u8> = (0..words * 4).map(|b| (b * 7 + 3) as u8).collect();
            m.load_image(src, &fill).unwrap();
            m.start_dma(src, dst, words);
        }
        m
    }
}

/// Architecturally visible result of running one program.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RefRun {
    pub pcs: Vec<u32>,
    pub taken: usize,
    /// (addr, value, write)
    pub data: Vec<(u32, u32, bool)>,
    pub regs: [u32; 16],
    pub halted: bool,
}

/// Executes a program without any timing model. Memory is a flat byte map
/// seeded with `image`; every other byte reads as zero.
pub fn reference_run(image: &[(u32, Vec<u8>)], entry: u32, max_steps: usize) -> RefRun {
    let mut mem: HashMap<u32, u8> = HashMap::new();
    for (base, bytes) in image {
        for (i, b) in bytes.iter().enumerate() {
            mem.insert(base + i as u32, *b);
        }
    }
    let load =
        |mem: &HashMap<u32, u8>, a: u32| -> u32 { u32::from_le_bytes([0, 1, 2, 3].map(|k| mem.get(&(a + k)).copied().unwrap_or(0))) };
    let mut out = RefRun::default();
    let mut pc = entry;
    for _ in 0..max_steps {
        let w = load(&mem, pc);
        let op = w >> 24;
        let rd = (w >> 20 & 0xF) as usize;
        let ra = (w >> 16 & 0xF) as usize;
        let imm = w & 0xFFFF;
        let simm = imm as u16 as i16 as i32;
        let rb = (imm & 0xF) as usize;
        let r = out.regs;
        let mut next = pc + 4;
        let set = |out: &mut RefRun, d: usize, v: u32| {
            if d != 0 {
                out.regs[d] = v;
            }
        };
        match op {
            0x00 => {}
            0x01 => set(&mut out, rd, if ra & 1 == 1 { imm << 16 } else { imm }),
            0x02 => set(&mut out, rd, r[ra].wrapping_add(r[rb])),
            0x03 => set(&mut out, rd, r[ra].wrapping_sub(r[rb])),
            0x04 => {
                let a = r[ra].wrapping_add(simm as u32);
                let v = load(&mem, a);
                out.data.push((a, v, false));
                set(&mut out, rd, v);
            }
            0x05 => {
                let a = r[ra].wrapping_add(simm as u32);
                for (k, b) in r[rd].to_le_bytes().iter().enumerate() {
                    mem.insert(a + k as u32, *b);
                }
                out.data.push((a, r[rd], true));
            }
            0x06..=0x08 => {
                let taken = match op {
                    0x06 => r[rd] == r[ra],
                    0x07 => r[rd] != r[ra],
                    _ => true,
                };
                if taken {
                    next = (pc as i64 + 4 + simm as i64) as u32;
                    out.taken += 1;
                }
            }
            0x09 => {
                if imm == 1 {
                    return out;
                }
                out.pcs.push(pc);
                out.halted = true;
                return out;
            }
            _ => return out,
        }
        out.pcs.push(pc);
        pc = next;
    }
    out
}


pub mod scenarios {
    //! Ready-made debug setups used by several suites.

    use mcds_core::asm::assemble;
    use mcds_core::machine::{CoreMode, Machine, MachineConfig, MasterId};
    use mcds_core::soc::{BlockConfig, DebugConfig, DebugSoc};
    use mcds_core::trigger::{Access, ActionSet, CompKind, CompOp, Comparator, Cond, FsmConfig, SourceFilter, Transition, TriggerConfig};
    use mcds_core::xtrig::{CrossTriggerConfig, Destination, Route, SwitchAction, SwitchEntry, TriggerSource};

    pub const VICTIM_BASE: u32 = 0x4000;

    /// Core 0 retires one NOP per cycle, so its pc `4k` retires at cycle `k`.
    pub fn nop_sled(n: usize) -> String {
        let mut s = "NOP\n".repeat(n);
        s.push_str("HALT\n");
        s
    }

    /// Core 1 loops over a flash load, a RAM store and ALU work.
    pub const VICTIM: &str = "
        LDI R14, 1
        LUI R13, 0x2000
        LDI R15, 200
top:    LD  R1, [R0+0x40]
        ADD R2, R1, R14
        ST  R2, [R13+0x100]
        NOP
        SUB R15, R15, R14
        BNE R15, R0, top
        HALT
    ";

    pub fn pc_break_block(source: u8, pc: u32) -> BlockConfig {
        let brk = ActionSet { break_req: true, ..ActionSet::default() };
        BlockConfig {
            trigger: TriggerConfig {
                comparators: vec![Comparator {
                    id: 0,
                    kind: CompKind::Pc,
                    op: CompOp::Eq,
                    lo: pc,
                    hi: 0,
                    access: Access::Exec,
                    source: SourceFilter::Master(source),
                }],
                fsm: FsmConfig {
                    states: 1,
                    initial: 0,
                    counters: vec![],
                    transitions: vec![Transition { from: 0, when: Cond::Hit(0), to: 0, actions: brk, counter_ops: vec![] }],
                },
            },
            ..BlockConfig::tracing(source)
        }
    }

    /// Block 0 breaks core `victim` through line 0 with delay `d`.
    pub fn break_route(victim: usize, d: u32) -> CrossTriggerConfig {
        CrossTriggerConfig {
            routes: vec![Route { source: TriggerSource::BreakReq { block: 0 }, lines: 1 }],
            switch: vec![SwitchEntry { dest: Destination::Core(victim), mask: 1, action: SwitchAction::Break }],
            delay: d,
        }
    }

    pub fn two_core_machine() -> Machine {
        let mut m = Machine::new(MachineConfig { cores: 2, ..MachineConfig::default() }).unwrap();
        m.load_image(0, &assemble(&nop_sled(300), 0).unwrap().bytes).unwrap();
        m.load_image(VICTIM_BASE, &assemble(VICTIM, VICTIM_BASE).unwrap().bytes).unwrap();
        m.set_entry(1, VICTIM_BASE).unwrap();
        m
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct SlipResult {
        pub trigger_cycle: u64,
        /// Victim instructions retired in cycles after the trigger cycle.
        pub slipped: usize,
        pub halted: bool,
        /// The halted pc is the target of the victim's last retire.
        pub precise: bool,
    }

    /// Core 0 hits its pc trigger at cycle `offset`; core 1 is the victim.
    pub fn slippage_trial(offset: u64, d: u32) -> SlipResult {
        let cfg =
            DebugConfig { blocks: vec![pc_break_block(0, 4 * offset as u32)], cross_trigger: break_route(1, d), ..DebugConfig::default() };
        let mut soc = DebugSoc::new(two_core_machine(), cfg).unwrap();
        let mut victim = Vec::new();
        soc.run_with(offset + d as u64 + 50, |r| {
            victim.extend(r.events.retires.iter().filter(|x| x.source == MasterId(1)).copied());
        });
        let core = soc.machine().core(1).unwrap();
        SlipResult {
            trigger_cycle: offset,
            slipped: victim.iter().filter(|r| r.cycle > offset).count(),
            halted: core.mode == CoreMode::HaltedBreak,
            precise: victim.last().map(|r| r.target) == Some(core.pc),
        }
    }
}
