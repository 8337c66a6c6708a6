//! Line-oriented interactive shell over a session.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::config::{parse_u64, Addr};
use crate::export;
use crate::session::{Command, Session};

const HELP: &str = "\
commands:
  run [cycles]            start from IDLE
  halt                    break all running cores
  resume [cycles]         continue from BROKEN
  step <cycles>           run a fixed number of cycles
  swbreak <addr> on|off   patch or restore a software breakpoint
  pin <n> 0|1             drive an external trigger input
  page [0|1]              show or select the calibration page
  cal <addr> <hex bytes>  write calibration data
  read <addr> <len>       read through the debug port
  reset                   target reset (trace and emulation memory kept)
  state                   print the session state
  trace [from]            print merged trace messages
  export <file>           write the trace (.mtrc or .jsonl)
  quit";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Line {
    Control(Command),
    ShowPage,
    Cal { addr: u32, bytes: Vec<u8> },
    Read { addr: u32, len: u8 },
    State,
    Trace { from: usize },
    Export(String),
    Help,
    Quit,
    Empty,
}

fn num(s: Option<&str>, what: &str) -> Result<u64, String> {
    let s = s.ok_or_else(|| format!("missing {what}"))?;
    parse_u64(s).ok_or_else(|| format!("bad {what} `{s}`"))
}

fn opt_num(s: Option<&str>, what: &str) -> Result<Option<u64>, String> {
    s.map(|_| num(s, what)).transpose()
}

fn small<T: TryFrom<u64>>(v: u64, what: &str) -> Result<T, String> {
    T::try_from(v).map_err(|_| format!("{what} {v} out of range"))
}

pub fn parse_line(line: &str) -> Result<Line, String> {
    let mut w = line.split_whitespace();
    let Some(head) = w.next() else { return Ok(Line::Empty) };
    let a = w.next();
    let b = w.next();
    Ok(match head {
        "run" => Line::Control(Command::Run { cycles: opt_num(a, "cycle count")? }),
        "halt" => Line::Control(Command::Halt),
        "resume" => Line::Control(Command::Resume { cycles: opt_num(a, "cycle count")? }),
        "step" => Line::Control(Command::Step { cycles: num(a, "cycle count")? }),
        "swbreak" => {
            let addr = Addr(small(num(a, "address")?, "address")?);
            let on = match b {
                Some("on") => true,
                Some("off") => false,
                _ => return Err("expected `on` or `off`".into()),
            };
            Line::Control(Command::Swbreak { addr, on })
        }
        "pin" => {
            let pin = small(num(a, "pin")?, "pin")?;
            let level = match b {
                Some("1" | "high" | "on") => true,
                Some("0" | "low" | "off") => false,
                _ => return Err("expected pin level 0 or 1".into()),
            };
            Line::Control(Command::SetPin { pin, level })
        }
        "page" => match a {
            None => Line::ShowPage,
            Some(_) => Line::Control(Command::Page { page: small(num(a, "page")?, "page")? }),
        },
        "cal" => {
            let addr = small(num(a, "address")?, "address")?;
            let hex: String = line.split_whitespace().skip(2).collect();
            if hex.is_empty() || !hex.len().is_multiple_of(2) {
                return Err("expected an even number of hex digits".into());
            }
            let bytes = (0..hex.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| format!("bad hex `{hex}`")))
                .collect::<Result<Vec<u8>, String>>()?;
            Line::Cal { addr, bytes }
        }
        "read" => Line::Read { addr: small(num(a, "address")?, "address")?, len: small(num(b, "length")?, "length")? },
        "reset" => Line::Control(Command::Reset),
        "state" => Line::State,
        "trace" => Line::Trace { from: opt_num(a, "index")?.unwrap_or(0) as usize },
        "export" => Line::Export(a.ok_or("missing file name")?.to_string()),
        "help" | "?" => Line::Help,
        "quit" | "exit" => Line::Quit,
        other => return Err(format!("unknown command `{other}` (try `help`)")),
    })
}

/// Reads commands until `quit` or end of input. Every command answers
/// with one line: JSON on success, `error: ...` otherwise.
pub fn run<R: BufRead, W: Write>(session: &mut Session, input: R, mut out: W, prompt: bool) -> std::io::Result<()> {
    if prompt {
        write!(out, "mcds> ")?;
        out.flush()?;
    }
    for line in input.lines() {
        let line = line?;
        let reply = match parse_line(&line) {
            Err(e) => Some(format!("error: {e}")),
            Ok(Line::Empty) => None,
            Ok(Line::Quit) => break,
            Ok(Line::Help) => Some(HELP.to_string()),
            Ok(Line::State) => Some(json(&session.state())),
            Ok(Line::ShowPage) => Some(match session.calibration_get_page() {
                Ok(p) => format!("{{\"page\":{p}}}"),
                Err(e) => format!("error: {e}"),
            }),
            Ok(Line::Control(c)) => Some(match session.execute(&c) {
                Ok(_) => json(&session.state()),
                Err(e) => format!("error: {e}"),
            }),
            Ok(Line::Cal { addr, bytes }) => Some(match session.calibration_write(addr, &bytes) {
                Ok(()) => "{\"ok\":true}".to_string(),
                Err(e) => format!("error: {e}"),
            }),
            Ok(Line::Read { addr, len }) => Some(match session.calibration_read(addr, len) {
                Ok(b) => json(&serde_json::json!({ "addr": addr, "bytes": b })),
                Err(e) => format!("error: {e}"),
            }),
            Ok(Line::Trace { from }) => Some(match export::jsonl(session.trace().get(from..).unwrap_or_default()) {
                Ok(s) => s.trim_end().to_string(),
                Err(e) => format!("error: {e}"),
            }),
            Ok(Line::Export(file)) => {
                let p = Path::new(&file);
                let r = if p.extension().is_some_and(|e| e == "jsonl") {
                    export::write_jsonl(p, session.trace())
                } else {
                    export::write_mtrc(p, session.trace())
                };
                Some(match r {
                    Ok(()) => format!("{{\"written\":{:?},\"messages\":{}}}", file, session.trace().len()),
                    Err(e) => format!("error: {e}"),
                })
            }
        };
        if let Some(r) = reply {
            if !r.is_empty() {
                writeln!(out, "{r}")?;
            }
        }
        if prompt {
            write!(out, "mcds> ")?;
            out.flush()?;
        }
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}
