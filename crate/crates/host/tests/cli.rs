mod common;

use std::io::Write;
use std::process::{Command, Output, Stdio};

use common::{fixtures, golden};
use mcds_core::asm::assemble;

fn mcds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcds")).args(args).output().unwrap()
}

fn path(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_decode() {
    let dir = tempfile::tempdir().unwrap();
    let mtrc = dir.path().join("t.mtrc");
    let cfg = fixtures().join("loop10.json");
    let out = mcds(&["run", "--config", path(&cfg), "--trace-out", path(&mtrc)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let st: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(st["phase"], "DONE");
    assert_eq!(std::fs::read(&mtrc).unwrap(), std::fs::read(golden().join("loop10.mtrc")).unwrap());

    let src = std::fs::read_to_string(fixtures().join("loop10.s")).unwrap();
    let bin = dir.path().join("loop10.bin");
    std::fs::write(&bin, assemble(&src, 0).unwrap().bytes).unwrap();
    let jsonl = dir.path().join("t.jsonl");
    let out = mcds(&["decode", "--trace", path(&mtrc), "--image", path(&bin), "--out", path(&jsonl)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["source"], 0);
    assert_eq!(summary["instructions"], 43);
    assert_eq!(summary["gaps"], 0);
    let lines = std::fs::read_to_string(&jsonl).unwrap();
    assert_eq!(lines.lines().count(), 12);
}

#[test]
fn cycle_limit_and_runtime_options() {
    let cfg = fixtures().join("loop10.json");
    let out = mcds(&["run", "--config", path(&cfg), "--cycles", "10"]);
    assert_eq!(out.status.code(), Some(0));
    let st: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(st["phase"], "BROKEN");
    assert_eq!(st["cycle"], 10);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"images": [{"core": 5, "path": "nope.s", "base": 0}]}"#).unwrap();
    let out = mcds(&["run", "--config", path(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("images[0].core"), "{err}");
    assert!(err.contains("images[0].path"), "{err}");
    let out = mcds(&["shell", "--config", path(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcds(&[
        "decode",
        "--trace",
        path(&dir.path().join("none.mtrc")),
        "--image",
        path(&dir.path().join("none.bin")),
        "--out",
        path(&dir.path().join("o.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let junk = dir.path().join("junk.mtrc");
    std::fs::write(&junk, b"NOPE").unwrap();
    std::fs::write(dir.path().join("i.bin"), [0u8; 4]).unwrap();
    let out =
        mcds(&["decode", "--trace", path(&junk), "--image", path(&dir.path().join("i.bin")), "--out", path(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shell_script() {
    let cfg = fixtures().join("cal.json");
    let mut child = Command::new(env!("CARGO_BIN_EXE_mcds"))
        .args(["shell", "--config", path(&cfg)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"state\nresume\nstep 20\npage 1\npage\ncal 0xE0001000 09000000\nread 0x8000 4\nfly\nrun\nquit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 9, "{text}");
    assert!(lines[0].contains("\"phase\":\"IDLE\""));
    assert!(lines[1].starts_with("error:"));
    assert!(lines[2].contains("\"cycle\":20"));
    assert_eq!(lines[4], "{\"page\":1}");
    assert_eq!(lines[6], "{\"addr\":32768,\"bytes\":[9,0,0,0]}");
    assert!(lines[7].starts_with("error: unknown command"));
    assert!(lines[8].starts_with("error:"), "run is only legal from IDLE: {}", lines[8]);
}
