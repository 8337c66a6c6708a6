mod common;

use common::{fixture_session, fixtures, golden, session_from};
use mcds_core::asm::assemble;
use mcds_core::machine::CoreMode;
use mcds_core::soc::StopReason;
use mcds_host::export;
use mcds_host::{Command, ControlError, Phase, Session, SessionConfig};
use mcds_testkit::reference_run;

fn run(s: &mut Session, cycles: Option<u64>) {
    s.execute(&Command::Run { cycles }).unwrap();
}

const SPIN: &str = "
        LDI R14, 1
        LDI R15, 0x7fff
top:    SUB R15, R15, R14
        BNE R15, R0, top
        HALT
";

fn spin_session() -> (tempfile::TempDir, Session) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spin.s"), SPIN).unwrap();
    let cfg = SessionConfig::from_json(r#"{"images": [{"core": 0, "path": "spin.s", "base": 0}], "debug": {"blocks": [{"source": 0}]}}"#)
        .unwrap();
    let s = Session::new(&cfg, dir.path()).unwrap();
    (dir, s)
}

#[test]
fn run_to_completion_and_to_the_limit() {
    let mut s = fixture_session("loop10.json");
    run(&mut s, Some(1000));
    let st = s.state();
    assert_eq!(st.phase, Phase::Done);
    assert!(st.cycle <= 1000);
    assert_eq!(st.stop, Some(StopReason::Quiescent));

    let (_d, mut s) = spin_session();
    run(&mut s, Some(1000));
    let st = s.state();
    assert_eq!(st.phase, Phase::Broken);
    assert_eq!(st.cycle, 1000);
    assert_eq!(st.stop, Some(StopReason::Limit));
}

#[test]
fn commands_respect_phases() {
    let (_d, mut s) = spin_session();
    let phase_err = |r: Result<_, ControlError>| matches!(r, Err(ControlError::Phase { .. }));
    assert!(phase_err(s.execute(&Command::Resume { cycles: None })));
    run(&mut s, Some(10));
    assert!(phase_err(s.execute(&Command::Run { cycles: None })));
    assert!(phase_err(s.execute(&Command::Halt)));
    s.execute(&Command::Step { cycles: 5 }).unwrap();
    assert_eq!(s.state().cycle, 15);
    s.execute(&Command::Resume { cycles: Some(5) }).unwrap();
    assert_eq!(s.state().cycle, 20);
    s.execute(&Command::Reset).unwrap();
    assert_eq!(s.state().phase, Phase::Idle);
    assert_eq!(s.state().cycle, 0);
    s.execute(&Command::Halt).unwrap();
    assert_eq!(s.state().phase, Phase::Broken);
    assert!(s.state().cores.iter().all(|c| c.mode == CoreMode::HaltedBreak));
    s.execute(&Command::Resume { cycles: None }).unwrap();
    assert_eq!(s.state().phase, Phase::Done);
    assert!(phase_err(s.execute(&Command::Resume { cycles: None })));
    assert!(phase_err(s.execute(&Command::Step { cycles: 1 })));
}

#[test]
fn halt_waits_for_in_flight_transactions() {
    let mut s = fixture_session("cal.json");
    s.control(&Command::Run { cycles: None }).unwrap();
    s.advance(5);
    assert_eq!(s.phase(), Phase::Running);
    // cycle 5: the first LD of the loop is in flight
    assert!(s.soc().machine().cores()[0].in_flight());
    s.control(&Command::Halt).unwrap();
    let st = s.state();
    assert_eq!(st.phase, Phase::Broken);
    assert_eq!(st.cores[0].mode, CoreMode::HaltedBreak);
    assert!(st.cycle > 5);
    assert!(!s.soc().machine().cores()[0].in_flight());
}

fn overlay_code_session() -> (tempfile::TempDir, Session, Vec<u8>) {
    let src = "LDI R1, 1\nLDI R2, 2\nADD R3, R1, R2\nADD R4, R3, R3\nHALT";
    let prog = assemble(src, 0x8000).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.bin"), &prog.bytes).unwrap();
    let cfg = SessionConfig::from_json(
        r#"{
        "images": [{"core": 0, "path": "p.bin", "base": "0x8000"}],
        "debug": {"blocks": [{"source": 0}]},
        "emu": {
            "segments": ["overlay"],
            "ranges": [{"id": 0, "flash_base": "0x8000", "size": 1024, "dest": [0, 1024]}],
            "preload": [{"addr": "0xE0000000", "path": "p.bin"}]
        }
    }"#,
    )
    .unwrap();
    let s = Session::new(&cfg, dir.path()).unwrap();
    (dir, s, prog.bytes)
}

#[test]
fn software_breakpoint_on_overlaid_code() {
    let (_d, mut s, bytes) = overlay_code_session();
    let oracle = reference_run(&[(0x8000, bytes)], 0x8000, 100);
    let bp = 0x8008;
    s.execute(&Command::Swbreak { addr: mcds_host::config::Addr(bp), on: true }).unwrap();
    let p = s.execute(&Command::Run { cycles: None }).unwrap();
    let st = s.state();
    assert_eq!(st.phase, Phase::Broken);
    assert_eq!(st.cores[0].pc, bp);
    let retired: usize = p.messages.iter().filter(|m| m.kind() == mcds_core::codec::MessageKind::ProgSync).count();
    assert!(retired >= 1);
    let retired_before = oracle.pcs.iter().position(|&pc| pc == bp).unwrap();
    assert_eq!(s.soc().machine().cores()[0].regs[2], 2);
    assert_eq!(retired_before, 2);
    s.execute(&Command::Resume { cycles: None }).unwrap();
    assert_eq!(s.state().phase, Phase::Done);
    assert_eq!(s.soc().machine().cores()[0].regs[4], 6);
}

#[test]
fn software_breakpoint_on_plain_flash_is_refused() {
    let mut s = fixture_session("loop10.json");
    let err = s.execute(&Command::Swbreak { addr: mcds_host::config::Addr(8), on: true }).unwrap_err();
    assert!(err.to_string().contains("emulation RAM"), "{err}");
    assert!(matches!(err, ControlError::Soc(_)));
}

#[test]
fn export_round_trips() {
    let mut s = fixture_session("cal.json");
    run(&mut s, None);
    let dir = tempfile::tempdir().unwrap();
    let mtrc = dir.path().join("t.mtrc");
    let jsonl = dir.path().join("t.jsonl");
    export::write_mtrc(&mtrc, s.trace()).unwrap();
    export::write_jsonl(&jsonl, s.trace()).unwrap();
    let back = export::read_mtrc(&mtrc).unwrap();
    assert!(back.damaged.is_empty());
    assert_eq!(back.messages, s.trace());
    let text = std::fs::read_to_string(&jsonl).unwrap();
    assert_eq!(text.lines().count(), s.trace().len());
    let parsed: Vec<mcds_core::codec::TraceMessage> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, s.trace());
    assert_eq!(s.state().trace_bytes + 5, std::fs::read(&mtrc).unwrap().len());
}

#[test]
fn empty_trace_exports_a_valid_file() {
    let s = fixture_session("loop10.json");
    let bytes = export::mtrc_bytes(s.trace());
    assert_eq!(bytes, b"MCDS\x01");
    assert!(export::decode_mtrc(&bytes).unwrap().messages.is_empty());
}

fn golden_run() -> Vec<u8> {
    let mut s = fixture_session("loop10.json");
    run(&mut s, None);
    export::mtrc_bytes(s.trace())
}

#[test]
fn loop_trace_matches_golden_file() {
    let path = golden().join("loop10.mtrc");
    let bytes = golden_run();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &bytes).unwrap();
    }
    let want = std::fs::read(&path).expect("golden file missing; run with UPDATE_GOLDEN=1");
    assert_eq!(bytes, want);
    let src = std::fs::read_to_string(fixtures().join("loop10.s")).unwrap();
    let prog = assemble(&src, 0).unwrap();
    let oracle = reference_run(&[(0, prog.bytes.clone())], 0, 1000);
    let d = export::decode_mtrc(&want).unwrap();
    let flow = mcds_core::codec::decode_program(&d.messages, 0, &mcds_core::codec::ImageView { base: 0, bytes: &prog.bytes }).unwrap();
    assert_eq!(flow.pcs, oracle.pcs);
}

#[test]
fn daq_lists_fire_on_their_period() {
    let mut s = session_from(
        r#"{
        "images": [{"core": 0, "path": "cal.s", "base": 0}],
        "daq": [{"id": 1, "entries": [{"addr": 536870912, "len": 4}], "period": 100, "active": true}],
        "max_cycles": 1000
    }"#,
    );
    let p = s.execute(&Command::Run { cycles: Some(1000) }).unwrap();
    let cycles = s.state().cycle;
    assert_eq!(p.daq.len() as u64, cycles / 100);
    assert!(p.daq.iter().all(|f| f.payload[0] == 1 && f.payload.len() == 5));
}

#[test]
fn calibration_commands_go_through_the_protocol() {
    let mut s = fixture_session("cal.json");
    s.calibration_write(0xE000_1000, &[9, 9, 9, 9]).unwrap();
    assert_eq!(s.calibration_read(0x8000, 4).unwrap(), vec![1, 0, 0, 0]);
    s.execute(&Command::Page { page: 1 }).unwrap();
    assert_eq!(s.calibration_get_page().unwrap(), 1);
    assert_eq!(s.calibration_read(0x8000, 4).unwrap(), vec![9, 9, 9, 9]);
    assert!(s.calibration_write(0x0, &[1]).is_err());
    assert!(s.execute(&Command::Page { page: 3 }).is_err());
    assert!(s.calibration_read(0x8000, 0).is_err());
}
