//! Session configuration files (JSON).
//!
//! Validation is all-or-nothing: every violation found is reported with the
//! JSON path it belongs to, and a config with any violation builds nothing.

use std::fmt;
use std::path::{Path, PathBuf};

use mcds_core::asm::assemble;
use mcds_core::emu::{OverlayRange, SegmentRole, TraceMode};
use mcds_core::machine::{Machine, MachineConfig};
use mcds_core::soc::{DebugConfig, DebugSoc};
use mcds_core::xcp::{DaqList, TransportKind, XcpServer};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// A 32-bit address or value, written in JSON as a number or a `"0x..."` string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(transparent)]
pub struct Addr(pub u32);

impl<'de> Deserialize<'de> for Addr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        let v = match Raw::deserialize(d)? {
            Raw::Num(n) => n,
            Raw::Str(s) => parse_u64(&s).ok_or_else(|| serde::de::Error::custom(format!("bad number `{s}`")))?,
        };
        u32::try_from(v).map(Addr).map_err(|_| serde::de::Error::custom(format!("{v:#x} does not fit in 32 bits")))
    }
}

pub fn parse_u64(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineSection {
    pub cores: usize,
    pub flash_size: usize,
    pub ram_size: usize,
    pub emu_size: usize,
    pub flash_latency: u32,
    pub ram_latency: u32,
    pub emu_latency: u32,
}

impl Default for MachineSection {
    fn default() -> Self {
        let d = MachineConfig::default();
        MachineSection {
            cores: d.cores,
            flash_size: d.flash_size,
            ram_size: d.ram_size,
            emu_size: d.emu_size,
            flash_latency: d.flash_latency,
            ram_latency: d.ram_latency,
            emu_latency: d.emu_latency,
        }
    }
}

impl From<&MachineSection> for MachineConfig {
    fn from(m: &MachineSection) -> Self {
        MachineConfig {
            cores: m.cores,
            flash_size: m.flash_size,
            ram_size: m.ram_size,
            emu_size: m.emu_size,
            flash_latency: m.flash_latency,
            ram_latency: m.ram_latency,
            emu_latency: m.emu_latency,
        }
    }
}

/// A program image. Files ending in `.s` or `.asm` are assembled at `base`;
/// anything else is loaded as raw bytes.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub core: usize,
    pub path: PathBuf,
    pub base: Addr,
    /// Defaults to `base`.
    #[serde(default)]
    pub entry: Option<Addr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaSpec {
    pub src: Addr,
    pub dst: Addr,
    pub words: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub id: u8,
    pub flash_base: Addr,
    pub size: u32,
    pub dest: [Addr; 2],
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

/// Bytes written into emulation RAM (or any writable region) before the run.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preload {
    pub addr: Addr,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmuSection {
    /// Role per segment, by index. Missing entries stay OFF.
    pub segments: Vec<SegmentRole>,
    pub ranges: Vec<RangeSpec>,
    pub page: u8,
    pub trace_mode: TraceMode,
    pub preload: Vec<Preload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub jtag_latency_ns: u64,
    pub usb_latency_ns: u64,
    /// Listen address of the USB-like XCP transport, e.g. `127.0.0.1:5555`.
    pub xcp_tcp: Option<String>,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            jtag_latency_ns: TransportKind::JtagLike.default_latency_ns(),
            usb_latency_ns: TransportKind::UsbLike.default_latency_ns(),
            xcp_tcp: None,
        }
    }
}

pub const DEFAULT_MAX_CYCLES: u64 = 1_000_000;

fn default_max_cycles() -> u64 {
    DEFAULT_MAX_CYCLES
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default)]
    pub machine: MachineSection,
    pub images: Vec<ImageSpec>,
    #[serde(default)]
    pub dma: Option<DmaSpec>,
    #[serde(default)]
    pub debug: DebugConfig,
    #[serde(default)]
    pub emu: EmuSection,
    #[serde(default)]
    pub transports: TransportSection,
    #[serde(default)]
    pub daq: Vec<DaqList>,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config rejected:\n{}", list(.0))]
    Invalid(Vec<Violation>),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// Everything a session needs, constructed from a valid config.
#[derive(Debug)]
pub struct Built {
    pub soc: DebugSoc,
    pub xcp: XcpServer,
    pub jtag_latency_ns: u64,
    pub usb_latency_ns: u64,
    pub max_cycles: u64,
}

struct Collector(Vec<Violation>);

impl Collector {
    fn push(&mut self, path: impl Into<String>, message: impl fmt::Display) {
        self.0.push(Violation { path: path.into(), message: message.to_string() });
    }
}

fn read_file(c: &mut Collector, at: &str, base_dir: &Path, p: &Path) -> Option<Vec<u8>> {
    let full = base_dir.join(p);
    match std::fs::read(&full) {
        Ok(b) => Some(b),
        Err(e) => {
            c.push(at, format!("cannot read {}: {e}", full.display()));
            None
        }
    }
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|error| ConfigError::Io { path: path.to_path_buf(), error })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_json(&text)?, dir))
    }

    pub fn build(&self, base_dir: &Path) -> Result<Built, ConfigError> {
        let mut c = Collector(Vec::new());
        let mcfg = MachineConfig::from(&self.machine);
        let mut machine = match Machine::new(mcfg) {
            Ok(m) => Some(m),
            Err(e) => {
                c.push("machine", e);
                None
            }
        };
        let cores = self.machine.cores;

        if self.images.is_empty() {
            c.push("images", "at least one image is required");
        }
        for (i, img) in self.images.iter().enumerate() {
            let at = format!("images[{i}]");
            if img.core >= cores {
                c.push(format!("{at}.core"), format!("core {} does not exist ({cores} configured)", img.core));
            }
            if self.images[..i].iter().any(|o| o.core == img.core) {
                c.push(format!("{at}.core"), format!("core {} already has an image", img.core));
            }
            let Some(raw) = read_file(&mut c, &format!("{at}.path"), base_dir, &img.path) else { continue };
            let bytes = if is_asm(&img.path) {
                match std::str::from_utf8(&raw).map_err(|e| e.to_string()).and_then(|s| assemble(s, img.base.0).map_err(|e| e.to_string()))
                {
                    Ok(p) => p.bytes,
                    Err(e) => {
                        c.push(format!("{at}.path"), format!("{}: {e}", img.path.display()));
                        continue;
                    }
                }
            } else {
                raw
            };
            if let Some(m) = machine.as_mut() {
                if let Err(e) = m.load_image(img.base.0, &bytes) {
                    c.push(format!("{at}.base"), e);
                }
                if img.core < cores {
                    m.set_entry(img.core, img.entry.unwrap_or(img.base).0).expect("core checked");
                }
            }
        }
        if let (Some(d), Some(m)) = (self.dma, machine.as_mut()) {
            m.start_dma(d.src.0, d.dst.0, d.words);
        }

        if let Some(m) = machine.as_mut() {
            let emu = m.emu_mut();
            for (i, &role) in self.emu.segments.iter().enumerate() {
                if let Err(e) = emu.set_segment_role(i, role) {
                    c.push(format!("emu.segments[{i}]"), e);
                }
            }
            if self.emu.ranges.len() > mcds_core::emu::MAX_RANGES {
                c.push("emu.ranges", format!("{} ranges given, at most {}", self.emu.ranges.len(), mcds_core::emu::MAX_RANGES));
            }
            for (i, r) in self.emu.ranges.iter().enumerate() {
                let at = format!("emu.ranges[{i}]");
                if self.emu.ranges[..i].iter().any(|o| o.id == r.id) {
                    c.push(format!("{at}.id"), format!("range id {} defined twice", r.id));
                    continue;
                }
                let range = OverlayRange { id: r.id, flash_base: r.flash_base.0, size: r.size, dest: [r.dest[0].0, r.dest[1].0] };
                if let Err(e) = emu.define_overlay_range(range) {
                    c.push(at, e);
                    continue;
                }
                if r.enabled {
                    if let Err(e) = emu.set_range_enabled(r.id, true) {
                        c.push(format!("{at}.enabled"), e);
                    }
                }
            }
            if let Err(e) = emu.set_cal_page(self.emu.page) {
                c.push("emu.page", e);
            }
            emu.set_trace_mode(self.emu.trace_mode);
            emu.begin_cycle();
            for (i, p) in self.emu.preload.iter().enumerate() {
                let at = format!("emu.preload[{i}]");
                let bytes = match &p.path {
                    Some(path) => match read_file(&mut c, &format!("{at}.path"), base_dir, path) {
                        Some(b) => b,
                        None => continue,
                    },
                    None => p.bytes.clone(),
                };
                if let Err(e) = m.load_image(p.addr.0, &bytes) {
                    c.push(at, e);
                }
            }
        }

        let masters = cores + 1;
        for (i, b) in self.debug.blocks.iter().enumerate() {
            let at = format!("debug.blocks[{i}]");
            if b.source as usize >= masters {
                c.push(format!("{at}.source"), format!("source {} is not a bus master (0..{masters})", b.source));
            }
            if self.debug.blocks[..i].iter().any(|o| o.source == b.source) {
                c.push(format!("{at}.source"), format!("source {} already has a block", b.source));
            }
            if let Err(e) = b.trigger.validate() {
                c.push(format!("{at}.trigger"), e);
            }
        }
        if let Err(e) = self.debug.cross_trigger.validate(self.debug.blocks.len(), cores) {
            c.push("debug.cross_trigger", e);
        }
        if let Err(e) = self.debug.timestamp.validate() {
            c.push("debug.timestamp", e);
        }
        if self.debug.sync_every == 0 {
            c.push("debug.sync_every", "must be at least 1");
        }

        if self.transports.jtag_latency_ns == 0 {
            c.push("transports.jtag_latency_ns", "latency must be positive");
        }
        if self.transports.usb_latency_ns == 0 {
            c.push("transports.usb_latency_ns", "latency must be positive");
        }
        if let Some(a) = &self.transports.xcp_tcp {
            if a.parse::<std::net::SocketAddr>().is_err() {
                c.push("transports.xcp_tcp", format!("`{a}` is not an addr:port"));
            }
        }
        for (i, l) in self.daq.iter().enumerate() {
            if let Err(e) = l.validate() {
                c.push(format!("daq[{i}]"), e);
            }
            if self.daq[..i].iter().any(|o| o.id == l.id) {
                c.push(format!("daq[{i}].id"), format!("DAQ list id {} defined twice", l.id));
            }
        }
        if self.max_cycles == 0 {
            c.push("max_cycles", "must be at least 1");
        }

        if !c.0.is_empty() {
            return Err(ConfigError::Invalid(c.0));
        }
        let machine = machine.expect("no violations");
        let soc = DebugSoc::new(machine, self.debug.clone())
            .map_err(|e| ConfigError::Invalid(vec![Violation { path: "debug".into(), message: e.to_string() }]))?;
        let xcp = XcpServer::new(self.daq.clone())
            .map_err(|e| ConfigError::Invalid(vec![Violation { path: "daq".into(), message: e.to_string() }]))?;
        Ok(Built {
            soc,
            xcp,
            jtag_latency_ns: self.transports.jtag_latency_ns,
            usb_latency_ns: self.transports.usb_latency_ns,
            max_cycles: self.max_cycles,
        })
    }
}

fn is_asm(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("s" | "asm"))
}
