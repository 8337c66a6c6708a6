//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{fixtures, golden};
use mcds_core::asm::assemble;
use mcds_core::codec::{decode_data, decode_program, deserialize, serialize, DataRecord, ImageView, MessageKind, Payload, TraceMessage};
use mcds_core::emu::{EmuRam, OverlayRange, SegmentRole, DEFAULT_SIZE};
use mcds_core::machine::{CycleEvents, Machine, MachineConfig, MasterId, EMU_RAM_BASE, RAM_BASE};
use mcds_core::soc::{BlockConfig, DebugConfig, DebugSoc};
use mcds_core::timestamp::{merge, recover_cycles, RecoverMode, TimestampConfig};
use mcds_core::trigger::{
    Access, ActionSet, CompKind, CompOp, Comparator, Cond, Counter, CounterOp, FsmConfig, SourceFilter, Transition, TriggerConfig,
};
use mcds_core::xcp::{cmd, DaqEntry, DaqList, LocalChannel, Transport, TransportKind, XcpFrame, XcpServer, POSITIVE};
use mcds_core::xtrig::{CrossTriggerConfig, Destination, Route, SwitchAction, SwitchEntry, TriggerSource};
use mcds_host::{shell, Command, Session};
use mcds_testkit::scenarios::slippage_trial;
use mcds_testkit::{random_source, rng, GenOptions, Scenario};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn two_cores() -> MachineConfig {
    MachineConfig { cores: 2, ..MachineConfig::default() }
}

/// Ticks until nothing is left to run.
fn finish(m: &mut Machine) -> Vec<CycleEvents> {
    let mut ev = Vec::new();
    while !m.quiescent() && ev.len() < 1_000_000 {
        ev.push(m.tick());
    }
    ev
}

fn within(t: Instant, budget: Duration) -> Result<Duration, String> {
    let e = t.elapsed();
    ensure!(e < budget, "took {e:.2?}, budget {budget:.0?}");
    Ok(e)
}

/// A block that fires on nearly everything its master does.
fn busy_block(source: u8) -> BlockConfig {
    let comp = |id, kind, op, lo, hi, access| Comparator { id, kind, op, lo, hi, access, source: SourceFilter::Master(source) };
    let brk = ActionSet { break_req: true, mark: true, trigger_out: 0b10, ..ActionSet::default() };
    let sus = ActionSet { suspend_req: true, trigger_out: 0b100, ..ActionSet::default() };
    BlockConfig {
        trigger: TriggerConfig {
            comparators: vec![
                comp(0, CompKind::Pc, CompOp::InRange, 0, 0xFFFF, Access::Exec),
                comp(1, CompKind::DataAddr, CompOp::InRange, RAM_BASE, RAM_BASE + 0xFFFF, Access::Any),
                comp(2, CompKind::BusMaster, CompOp::Eq, source as u32, 0, Access::Any),
            ],
            fsm: FsmConfig {
                states: 2,
                initial: 0,
                counters: vec![Counter { threshold: 5, count_event: Some(2) }],
                transitions: vec![
                    Transition { from: 0, when: Cond::Hit(0), to: 1, actions: brk, counter_ops: vec![] },
                    Transition {
                        from: 1,
                        when: Cond::Any(vec![Cond::Hit(1), Cond::Elapsed(0)]),
                        to: 0,
                        actions: sus,
                        counter_ops: vec![CounterOp::Clear(0)],
                    },
                ],
            },
        },
        ..BlockConfig::tracing(source)
    }
}

fn full_debug(masters: usize) -> DebugConfig {
    let mut routes = Vec::new();
    for b in 0..masters {
        routes.push(Route { source: TriggerSource::BreakReq { block: b }, lines: 1 });
        routes.push(Route { source: TriggerSource::SuspendReq { block: b }, lines: 2 });
        routes.push(Route { source: TriggerSource::TrigOut { block: b, line: 1 }, lines: 4 });
    }
    routes.push(Route { source: TriggerSource::Pin(0), lines: 1 });
    let mut switch: Vec<SwitchEntry> =
        (0..masters - 1).map(|c| SwitchEntry { dest: Destination::Core(c), mask: 1, action: SwitchAction::Break }).collect();
    switch.push(SwitchEntry { dest: Destination::Dma, mask: 2, action: SwitchAction::Suspend });
    switch.push(SwitchEntry { dest: Destination::Pin(0), mask: 4, action: SwitchAction::PulseOut });
    DebugConfig {
        blocks: (0..masters as u8).map(busy_block).collect(),
        cross_trigger: CrossTriggerConfig { routes, switch, delay: 1 },
        timestamp: TimestampConfig { width: 8, sync_period: 64 },
        sync_every: 4,
        actions_enabled: false,
    }
}

fn transparency() -> Outcome {
    let t = Instant::now();
    let mut cycles = 0;
    for seed in 0..20 {
        let sc = Scenario::random(seed, 2, true, &GenOptions::default());
        let plain = sc.machine(two_cores()).step(5_000, |_| Vec::new());
        let mut m = sc.machine(two_cores());
        m.emu_mut().set_segment_role(7, SegmentRole::Trace).unwrap();
        let mut soc = DebugSoc::new(m, full_debug(3)).map_err(|e| e.to_string())?;
        let list = DaqList { id: 0, entries: vec![DaqEntry { addr: RAM_BASE, len: 8 }], period: 7, active: false };
        let mut daq = XcpServer::new(vec![list]).unwrap();
        let mut m2 = Machine::new(MachineConfig::default()).unwrap();
        daq.serve(&XcpFrame::new(0, vec![cmd::CONNECT]), &mut m2);
        daq.serve(&XcpFrame::new(1, vec![cmd::START_STOP_DAQ, 0, 1]), &mut m2);
        let mut seen: Vec<CycleEvents> = Vec::with_capacity(5_000);
        let mut hits = 0;
        for _ in 0..5_000 {
            let r = soc.tick();
            hits += r.delivered.len();
            daq.daq_tick(r.events.cycle, soc.machine());
            seen.push(r.events);
        }
        ensure!(soc.pending().is_empty() && hits == 0, "seed {seed}: actions reached the target");
        ensure!(!soc.trace().is_empty(), "seed {seed}: no trace captured");
        ensure!(seen == plain, "seed {seed}: cycle events differ");
        cycles += seen.len();
    }
    let e = within(t, Duration::from_secs(10))?;
    Ok(format!("20 programs, {cycles} cycles identical, {e:.2?}"))
}

fn codec_round_trip() -> Outcome {
    let t = Instant::now();
    let (mut retires, mut accesses, mut bytes) = (0usize, 0usize, 0usize);
    for seed in 0..1000u64 {
        let sc = Scenario::random(seed, 2, true, &GenOptions::default());
        let plain = finish(&mut sc.machine(two_cores()));
        let n: usize = plain.iter().map(|e| e.retires.len()).sum();
        ensure!(n <= 10_000, "seed {seed}: {n} retires");
        let cfg = DebugConfig { sync_every: 1 + (seed as u32 % 16), ..DebugConfig::trace_all(3) };
        let mut soc = DebugSoc::new(sc.machine(two_cores()), cfg).unwrap();
        soc.run(40_000);
        soc.flush();
        let wire_bytes = serialize(soc.trace());
        let wire = deserialize(&wire_bytes).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure!(wire.iter().copied().eq(soc.trace().iter().map(|m| m.without_cycle())), "seed {seed}: frames changed");
        ensure!(serialize(&wire) == wire_bytes, "seed {seed}: reserialized bytes differ");
        for c in 0..2u8 {
            let (base, image) = &sc.images[c as usize];
            let flow = decode_program(&wire, c, &ImageView { base: *base, bytes: image }).map_err(|e| format!("seed {seed}: {e}"))?;
            let want: Vec<u32> = plain.iter().flat_map(|e| &e.retires).filter(|r| r.source == MasterId(c)).map(|r| r.pc).collect();
            ensure!(flow.pcs == want && flow.gaps.is_empty(), "seed {seed} core {c}: program flow differs");
        }
        for s in 0..3u8 {
            let want: Vec<DataRecord> =
                plain.iter().flat_map(|e| &e.data).filter(|d| d.source == MasterId(s)).map(DataRecord::from).collect();
            let got = decode_data(&wire, s).map_err(|e| format!("seed {seed}: {e}"))?;
            ensure!(got == want, "seed {seed} source {s}: data differs");
            accesses += want.len();
        }
        retires += n;
        bytes += wire_bytes.len();
    }
    let e = within(t, Duration::from_secs(60))?;
    Ok(format!("1000 programs, {retires} retires, {accesses} accesses, {bytes} bytes, {e:.2?}"))
}

fn temporal_order() -> Outcome {
    let mut checked = 0usize;
    for seed in 0..100u64 {
        let sc = Scenario::random(1_000 + seed, 2, true, &GenOptions::default());
        let plain = finish(&mut sc.machine(two_cores()));
        let mut cfg = DebugConfig::trace_all(3);
        if seed % 2 == 0 {
            cfg.timestamp = TimestampConfig { width: 8, sync_period: 64 };
        }
        let mut soc = DebugSoc::new(sc.machine(two_cores()), cfg).unwrap();
        soc.run(20_000);
        soc.flush();
        let wire = deserialize(&serialize(soc.trace())).unwrap();
        let streams: Vec<Vec<TraceMessage>> = (0..3u8)
            .map(|s| recover_cycles(&wire.iter().filter(|m| m.source == s).copied().collect::<Vec<_>>(), RecoverMode::Strict))
            .collect::<Result<_, _>>()
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let merged = merge(&streams);
        ensure!(merged.windows(2).all(|w| w[0].cycle <= w[1].cycle), "seed {seed}: cycles decrease");

        // true cycles of every taken branch and data access, per source, from the untraced run
        let mut branches: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
        let mut data: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
        for e in &plain {
            for r in e.retires.iter().filter(|r| r.taken) {
                branches.entry(r.source.0).or_default().push(r.cycle);
            }
            for d in &e.data {
                data.entry(d.source.0).or_default().push(d.cycle);
            }
        }
        let mut cursor: BTreeMap<(u8, bool), usize> = BTreeMap::new();
        let mut order: Vec<(u64, u8)> = Vec::new();
        for m in &merged {
            let table = match m.payload {
                Payload::Branch { .. } => &branches,
                Payload::Data { .. } => &data,
                _ => continue,
            };
            let i = cursor.entry((m.source, matches!(m.payload, Payload::Data { .. }))).or_default();
            let truth = table.get(&m.source).and_then(|v| v.get(*i)).copied().ok_or(format!("seed {seed}: extra message"))?;
            *i += 1;
            ensure!(m.cycle == Some(truth), "seed {seed}: source {} stamped {:?}, true {truth}", m.source, m.cycle);
            order.push((truth, m.source));
        }
        let total: usize = branches.values().chain(data.values()).map(Vec::len).sum();
        ensure!(order.len() == total, "seed {seed}: {} of {total} events traced", order.len());
        // a pair out of order anywhere implies an adjacent inversion
        ensure!(order.windows(2).all(|w| w[0].0 <= w[1].0), "seed {seed}: cross-source pair out of order");
        checked += order.len();
    }
    Ok(format!("100 runs, {checked} events in true order"))
}

fn slippage() -> Outcome {
    let mut worst = 0;
    for offset in 0..100 {
        let r = slippage_trial(offset, 1);
        ensure!(r.halted && r.precise, "offset {offset}: {r:?}");
        ensure!(r.slipped <= 2, "offset {offset}: slipped {}", r.slipped);
        worst = worst.max(r.slipped);
    }
    Ok(format!("100 offsets, worst slippage {worst}"))
}

fn overlay_constants() -> Outcome {
    let mut emu = EmuRam::new(DEFAULT_SIZE).unwrap();
    ensure!(DEFAULT_SIZE == 512 * 1024 && emu.segment_count() == 8, "{} segments", emu.segment_count());
    emu.set_segment_role(0, SegmentRole::Overlay).unwrap();
    emu.set_segment_role(1, SegmentRole::Overlay).unwrap();
    for id in 0..16u8 {
        let r = OverlayRange {
            id,
            flash_base: 0x10_0000 + 0x400 * id as u32,
            size: 0x400,
            dest: [0x400 * id as u32, 0x1_0000 + 0x400 * id as u32],
        };
        emu.define_overlay_range(r).map_err(|e| format!("range {id}: {e}"))?;
    }
    let extra = OverlayRange { id: 16, flash_base: 0x20_0000, size: 0x400, dest: [0x8000, 0x1_8000] };
    ensure!(emu.define_overlay_range(extra).is_err(), "17th range accepted");

    let mut sizes: Vec<u32> = (0..32).map(|k| 1u32 << k).collect();
    sizes.extend([0, 3, 1000, 1023, 1025, 1536, 3072, 24576, 32767, 32769, 49152, u32::MAX]);
    let mut r = rng(5);
    sizes.extend((0..2000).map(|_| rand::Rng::gen_range(&mut r, 0..70_000u32)));
    let mut probe = EmuRam::new(DEFAULT_SIZE).unwrap();
    probe.set_segment_role(0, SegmentRole::Overlay).unwrap();
    let mut accepted = Vec::new();
    for &size in &sizes {
        let legal = size.is_power_of_two() && (1024..=32 * 1024).contains(&size);
        let ok = probe.define_overlay_range(OverlayRange { id: 0, flash_base: 0, size, dest: [0, 0x8000] }).is_ok();
        ensure!(ok == legal, "size {size}: accepted={ok}");
        if ok && !accepted.contains(&size) {
            accepted.push(size);
        }
    }
    ensure!(accepted.len() == 6, "accepted sizes {accepted:?}");

    let base = 0x8000;
    let mut total = 0;
    for seed in 0..20 {
        let opts = GenOptions { segments: 1..=4, straight_len: 1..=8, ..GenOptions::default() };
        let prog = assemble(&random_source(&mut rng(seed), 0, &opts), base).unwrap();
        let mut flash = Machine::new(MachineConfig::default()).unwrap();
        flash.load_image(base, &prog.bytes).unwrap();
        flash.set_entry(0, base).unwrap();
        let mut over = Machine::new(MachineConfig::default()).unwrap();
        let emu = over.emu_mut();
        emu.set_segment_role(0, SegmentRole::Overlay).unwrap();
        emu.define_overlay_range(OverlayRange { id: 0, flash_base: base, size: 0x1000, dest: [0, 0x1000] }).unwrap();
        emu.set_range_enabled(0, true).unwrap();
        over.load_image(EMU_RAM_BASE, &prog.bytes).unwrap();
        over.set_entry(0, base).unwrap();
        let a = finish(&mut flash);
        let b = finish(&mut over);
        let pcs = |ev: &[CycleEvents]| ev.iter().flat_map(|e| e.retires.iter().map(|r| (r.cycle, r.pc))).collect::<Vec<_>>();
        ensure!(flash.cycle() == over.cycle() && pcs(&a) == pcs(&b), "seed {seed}: {} vs {} cycles", flash.cycle(), over.cycle());
        total += over.cycle();
    }
    Ok(format!("8 segments, 16 ranges, {} sizes probed, {total} overlay cycles equal flash", sizes.len()))
}

const TUPLE_SRC: &str = "
        LDI R1, 0x8000
        LUI R2, 0x2000
        LDI R14, 1
        LDI R15, 400
loop:   LD  R3, [R1]
        ST  R3, [R2]
        SUB R15, R15, R14
        BNE R15, R0, loop
        HALT
";

fn pack(a: u16, b: u16) -> u32 {
    a as u32 | (b as u32) << 16
}

fn tuple_machine() -> Machine {
    let mut m = Machine::new(MachineConfig::default()).unwrap();
    let emu = m.emu_mut();
    emu.set_segment_role(0, SegmentRole::Overlay).unwrap();
    emu.define_overlay_range(OverlayRange { id: 0, flash_base: 0x8000, size: 0x1000, dest: [0, 0x1000] }).unwrap();
    emu.set_range_enabled(0, true).unwrap();
    m.load_image(0, &assemble(TUPLE_SRC, 0).unwrap().bytes).unwrap();
    m.load_image(0x8000, &pack(0x5555, 0x6666).to_le_bytes()).unwrap();
    m.load_image(EMU_RAM_BASE, &pack(0x1111, 0x2222).to_le_bytes()).unwrap();
    m.load_image(EMU_RAM_BASE + 0x1000, &pack(0x3333, 0x4444).to_le_bytes()).unwrap();
    m
}

fn atomic_swap() -> Outcome {
    let (old, new) = ((0x1111, 0x2222), (0x3333, 0x4444));
    let reads = |ev: &[CycleEvents]| -> Vec<(u64, (u16, u16))> {
        ev.iter()
            .flat_map(|e| &e.data)
            .filter(|d| !d.write && d.addr == 0x8000)
            .map(|d| (d.cycle, (d.value as u16, (d.value >> 16) as u16)))
            .collect()
    };
    let baseline = reads(&finish(&mut tuple_machine()));
    ensure!(baseline.len() == 400 && baseline.last().unwrap().0 > 1_000, "loop too short");
    let period = baseline[1].0 - baseline[0].0;
    let mut tuples = 0;
    for k in 0..1000u64 {
        let mut m = tuple_machine();
        let mut ev = m.step(k, |_| Vec::new());
        let mut server = XcpServer::default();
        let mut jtag = Transport::with_default_latency(TransportKind::JtagLike);
        let mut ch = LocalChannel { server: &mut server, target: &mut m };
        jtag.roundtrip(&XcpFrame::new(0, vec![cmd::CONNECT]), &mut ch).unwrap();
        let (resp, _) = jtag.roundtrip(&XcpFrame::new(1, vec![cmd::SET_CAL_PAGE, 1]), &mut ch).unwrap();
        ensure!(resp.payload == [POSITIVE], "offset {k}: swap refused");
        ev.extend(finish(&mut m));
        let got = reads(&ev);
        ensure!(got.len() == 400, "offset {k}: {} reads", got.len());
        for (cycle, t) in &got {
            ensure!(*t == old || *t == new, "offset {k}: mixed tuple {t:x?} at cycle {cycle}");
        }
        let switched = got.iter().position(|x| x.1 == new).ok_or(format!("offset {k}: swap never seen"))?;
        ensure!(got[switched..].iter().all(|x| x.1 == new), "offset {k}: old page after swap");
        let first = got[switched].0;
        ensure!(first >= k && first <= k + period + 2, "offset {k}: new page first seen at {first}");
        tuples += got.len();
    }
    Ok(format!("1000 swap offsets, {tuples} tuples, 0 mixed"))
}

fn latency() -> Outcome {
    let mut m = Machine::new(MachineConfig::default()).unwrap();
    let mut server = XcpServer::default();
    let mut ch = LocalChannel { server: &mut server, target: &mut m };
    let mut jtag = Transport::with_default_latency(TransportKind::JtagLike);
    let mut usb = Transport::with_default_latency(TransportKind::UsbLike);
    let (_, a) = jtag.roundtrip(&XcpFrame::new(0, vec![cmd::CONNECT]), &mut ch).unwrap();
    let (_, b) = usb.roundtrip(&XcpFrame::new(1, vec![cmd::GET_STATUS]), &mut ch).unwrap();
    ensure!(a == 4_000, "jtag round trip {a} ns");
    ensure!(b == 6_000_000, "usb round trip {b} ns");
    ensure!(b % a == 0 && b / a == 1500, "ratio {b}/{a}");
    let s = common::fixture_session("loop10.json");
    let (j, u) = s.latencies_ns();
    ensure!((2 * j, 2 * u) == (a, b), "session transports {j}/{u} ns one way");
    Ok(format!("jtag {a} ns, usb {b} ns, ratio {}", b / a))
}

fn persistence() -> Outcome {
    let mut s = common::fixture_session("cal.json");
    s.execute(&Command::Run { cycles: None }).map_err(|e| e.to_string())?;
    s.calibration_write(EMU_RAM_BASE + 0x1004, b"tuned").map_err(|e| e.to_string())?;
    let snap = |s: &Session| {
        let m = s.soc().machine();
        (m.emu().trace_read_all().unwrap(), m.debug_read(EMU_RAM_BASE, 0x2000).unwrap())
    };
    let (trace, overlay) = snap(&s);
    ensure!(!trace.is_empty(), "trace buffer empty before reset");
    s.execute(&Command::Reset).map_err(|e| e.to_string())?;
    ensure!(s.soc().machine().cycle() == 0, "target not reset");
    let (trace2, overlay2) = snap(&s);
    ensure!(trace == trace2, "trace buffer changed across reset");
    ensure!(overlay == overlay2, "overlay contents changed across reset");
    Ok(format!("{} trace bytes and {} overlay bytes unchanged", trace.len(), overlay.len()))
}

fn nops(n: usize) -> Vec<u8> {
    let mut s = "NOP\n".repeat(n);
    s.push_str("HALT\n");
    assemble(&s, 0).unwrap().bytes
}

fn qualification_and_compression() -> Outcome {
    let image = nops(9_999);
    let machine = || {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        m.load_image(0, &image).unwrap();
        m
    };
    let (lo, hi) = (5_000u64, 5_100u64);
    let plain = finish(&mut machine());
    ensure!(plain.len() == 10_000, "run is {} cycles", plain.len());
    let want: Vec<u32> = plain.iter().filter(|e| (lo..hi).contains(&e.cycle)).flat_map(|e| e.retires.iter().map(|r| r.pc)).collect();
    let pc = |id, pc| Comparator { id, kind: CompKind::Pc, op: CompOp::Eq, lo: pc, hi: 0, access: Access::Exec, source: SourceFilter::Any };
    let on = ActionSet { trace_on: true, ..ActionSet::default() };
    let off = ActionSet { trace_off: true, ..ActionSet::default() };
    let block = BlockConfig {
        trace_enabled: false,
        trigger: TriggerConfig {
            comparators: vec![pc(0, want[0]), pc(1, want[want.len() - 1] + 4)],
            fsm: FsmConfig {
                states: 1,
                initial: 0,
                counters: vec![],
                transitions: vec![
                    Transition { from: 0, when: Cond::Hit(0), to: 0, actions: on, counter_ops: vec![] },
                    Transition { from: 0, when: Cond::Hit(1), to: 0, actions: off, counter_ops: vec![] },
                ],
            },
        },
        ..BlockConfig::tracing(0)
    };
    let mut soc = DebugSoc::new(machine(), DebugConfig { blocks: vec![block], ..DebugConfig::default() }).unwrap();
    soc.run(20_000);
    soc.flush();
    let outside: Vec<Option<u64>> = soc.trace().iter().map(|m| m.cycle).filter(|c| !c.is_some_and(|c| (lo..hi).contains(&c))).collect();
    ensure!(outside.is_empty(), "messages outside the window at {outside:?}");
    let flow = decode_program(soc.trace(), 0, &ImageView { base: 0, bytes: &image }).map_err(|e| e.to_string())?;
    ensure!(flow.pcs == want, "window flow has {} of {} pcs", flow.pcs.len(), want.len());
    let windowed = soc.trace().len();

    let image = nops(999);
    let mut m = Machine::new(MachineConfig::default()).unwrap();
    m.load_image(0, &image).unwrap();
    let mut soc = DebugSoc::new(m, DebugConfig::trace_all(1)).unwrap();
    soc.run(5_000);
    soc.flush();
    let count = |k| soc.trace().iter().filter(|m| m.kind() == k).count();
    let syncs = soc.trace().iter().filter(|m| matches!(m.payload, Payload::ProgSync { end: false, .. })).count();
    let ends = soc.trace().iter().filter(|m| matches!(m.payload, Payload::ProgSync { end: true, .. })).count();
    let branches = count(MessageKind::Branch);
    let sync_every = DebugConfig::default().sync_every as usize;
    let bound = 1 + branches / sync_every;
    ensure!(branches == 0, "{branches} BRANCH messages");
    ensure!(syncs <= bound, "{syncs} PROG_SYNC, bound {bound}");
    let flow = decode_program(soc.trace(), 0, &ImageView { base: 0, bytes: &image }).map_err(|e| e.to_string())?;
    ensure!(flow.pcs.len() == 1000, "straight-line flow has {} pcs", flow.pcs.len());
    Ok(format!(
        "window trace {windowed} messages all in [{lo},{hi}); straight line: {syncs} PROG_SYNC (bound {bound}) + {ends} end record, {} TS_SYNC, 0 BRANCH",
        count(MessageKind::TsSync)
    ))
}

fn scripted(config: &str, script: &str, out: &std::path::Path) -> Result<Vec<u8>, String> {
    let mut s = Session::load(&fixtures().join(config)).map_err(|e| e.to_string())?;
    let script = format!("{script}\nexport {}\n", out.display());
    let mut replies = Vec::new();
    shell::run(&mut s, script.as_bytes(), &mut replies, false).map_err(|e| e.to_string())?;
    let replies = String::from_utf8(replies).unwrap();
    ensure!(!replies.contains("error:"), "script failed: {replies}");
    std::fs::read(out).map_err(|e| e.to_string())
}

fn replayability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let script = "step 50\npage 1\ncal 0xE0001000 05000000\npin 0 1\nresume 500\nreset\nrun 2000";
    let a = scripted("cal.json", script, &p("a.mtrc"))?;
    let b = scripted("cal.json", script, &p("b.mtrc"))?;
    ensure!(a.len() > 5, "empty trace");
    ensure!(a == b, "calibration script traces differ");
    let g1 = scripted("loop10.json", "run", &p("g1.mtrc"))?;
    let g2 = scripted("loop10.json", "run", &p("g2.mtrc"))?;
    let gold = std::fs::read(golden().join("loop10.mtrc")).map_err(|e| e.to_string())?;
    ensure!(g1 == g2, "loop traces differ between runs");
    ensure!(g1 == gold, "loop trace differs from the golden file");
    Ok(format!("{} byte script trace twice identical, {} byte golden match", a.len(), gold.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("transparency", transparency),
        ("codec round trip", codec_round_trip),
        ("temporal order", temporal_order),
        ("slippage", slippage),
        ("overlay constants", overlay_constants),
        ("atomic swap", atomic_swap),
        ("latency constants", latency),
        ("persistence", persistence),
        ("qualification and compression", qualification_and_compression),
        ("replayability", replayability),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match r {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
