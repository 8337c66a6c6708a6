//! Emulation memory: a block of SRAM outside the production memory map, cut
//! into 64 KiB segments that serve either as calibration overlay or as trace
//! buffer.
//!
//! Overlay ranges redirect flash addresses into overlay segments. Each range
//! has two destination areas (calibration pages); one global page-select bit
//! chooses which one is live. Page and enable changes are staged and become
//! effective at the next cycle boundary ([`EmuRam::begin_cycle`]), so every
//! access within one cycle sees one consistent configuration.
//!
//! Contents and configuration live in their own power domain: target reset
//! does not touch this module.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

pub const SEGMENT_SIZE: usize = 64 * 1024;
pub const DEFAULT_SIZE: usize = 512 * 1024;
pub const MAX_RANGES: usize = 16;
pub const MIN_RANGE_SIZE: u32 = 1024;
pub const MAX_RANGE_SIZE: u32 = 32 * 1024;

/// Control register offsets inside the control window.
pub mod regs {
    /// Page select, bit 0. Writes are staged to the next cycle boundary.
    pub const PAGE: u32 = 0x00;
    /// First overlay range register block; block `id` lives at `RANGE_BASE + RANGE_STRIDE * id`.
    pub const RANGE_BASE: u32 = 0x10;
    pub const RANGE_STRIDE: u32 = 0x10;
    /// Within a range block: bit 0 enable (writable), bits 15:8 log2(size).
    pub const RANGE_CTRL: u32 = 0x0;
    pub const RANGE_FLASH_BASE: u32 = 0x4;
    pub const RANGE_DEST0: u32 = 0x8;
    pub const RANGE_DEST1: u32 = 0xC;
    /// Size of the decoded register window.
    pub const WINDOW: u32 = RANGE_BASE + RANGE_STRIDE * super::MAX_RANGES as u32;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmuError {
    #[error("emulation memory size {0} is not a non-zero multiple of 64 KiB")]
    BadSize(usize),
    #[error("segment {0} does not exist")]
    NoSuchSegment(usize),
    #[error("segment {segment} is in use by {user}")]
    SegmentInUse { segment: usize, user: &'static str },
    #[error("overlay range id {0} out of range (at most 16 ranges, ids 0..=15)")]
    RangeId(u8),
    #[error("overlay range {id}: size {size} is not a power of two between 1 KiB and 32 KiB")]
    RangeSize { id: u8, size: u32 },
    #[error("overlay range {id}: flash base {base:#x} not aligned to size {size:#x}")]
    RangeAlign { id: u8, base: u32, size: u32 },
    #[error("overlay range {id}: destination {dest:#x} not wholly inside overlay segments")]
    RangeDest { id: u8, dest: u32 },
    #[error("overlay range {id}: destination areas overlap ({other})")]
    DestOverlap { id: u8, other: u8 },
    #[error("overlay range {id}: flash window overlaps enabled range {other}")]
    FlashOverlap { id: u8, other: u8 },
    #[error("overlay range {0} is enabled and cannot be redefined")]
    RangeEnabled(u8),
    #[error("overlay range {0} is not defined")]
    RangeUndefined(u8),
    #[error("calibration page {0} does not exist (pages 0 and 1)")]
    BadPage(u8),
    #[error("no segment has the TRACE role")]
    NoTraceSegment,
    #[error("emulation memory access {offset:#x}+{len} out of bounds")]
    OutOfBounds { offset: usize, len: usize },
    #[error("control register {0:#x} is not writable")]
    ReadOnly(u32),
    #[error("control register access {0:#x} not word aligned")]
    Unaligned(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SegmentRole {
    #[default]
    Off,
    Overlay,
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OverlayRange {
    pub id: u8,
    pub flash_base: u32,
    pub size: u32,
    /// Offsets into emulation RAM for page 0 and page 1.
    pub dest: [u32; 2],
}

impl OverlayRange {
    pub fn contains(&self, addr: u32) -> bool {
        addr.wrapping_sub(self.flash_base) < self.size
    }

    fn flash_overlaps(&self, other: &OverlayRange) -> bool {
        let (a0, a1) = (self.flash_base as u64, self.flash_base as u64 + self.size as u64);
        let (b0, b1) = (other.flash_base as u64, other.flash_base as u64 + other.size as u64);
        a0 < b1 && b0 < a1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RangeSlot {
    range: OverlayRange,
    enabled: bool,
    staged: Option<bool>,
}

impl RangeSlot {
    fn enabled_after_boundary(&self) -> bool {
        self.staged.unwrap_or(self.enabled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TraceMode {
    #[default]
    Circular,
    FillOnce,
}

/// Where an access ends up after overlay translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Flash(u32),
    Emu(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routed {
    pub target: Route,
    pub latency: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceBuffer {
    segments: Vec<usize>,
    pub mode: TraceMode,
    write_offset: usize,
    wrapped: bool,
    dropped: u64,
}

impl TraceBuffer {
    pub fn capacity(&self) -> usize {
        self.segments.len() * SEGMENT_SIZE
    }

    pub fn len(&self) -> usize {
        if self.wrapped {
            self.capacity()
        } else {
            self.write_offset
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn wrapped(&self) -> bool {
        self.wrapped
    }

    /// Appends dropped because a FILL_ONCE buffer was full.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    fn physical(&self, pos: usize) -> usize {
        self.segments[pos / SEGMENT_SIZE] * SEGMENT_SIZE + pos % SEGMENT_SIZE
    }
}

/// The emulation RAM and its address-mapping block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmuRam {
    bytes: Vec<u8>,
    roles: Vec<SegmentRole>,
    ranges: [Option<RangeSlot>; MAX_RANGES],
    active_page: u8,
    staged_page: Option<u8>,
    trace: TraceBuffer,
}

impl Default for EmuRam {
    fn default() -> Self {
        EmuRam::new(DEFAULT_SIZE).expect("default size is valid")
    }
}

impl EmuRam {
    pub fn new(size: usize) -> Result<Self, EmuError> {
        if size == 0 || !size.is_multiple_of(SEGMENT_SIZE) {
            return Err(EmuError::BadSize(size));
        }
        Ok(EmuRam {
            bytes: vec![0; size],
            roles: vec![SegmentRole::Off; size / SEGMENT_SIZE],
            ranges: [None; MAX_RANGES],
            active_page: 0,
            staged_page: None,
            trace: TraceBuffer { segments: Vec::new(), mode: TraceMode::Circular, write_offset: 0, wrapped: false, dropped: 0 },
        })
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn segment_count(&self) -> usize {
        self.roles.len()
    }

    pub fn segment_role(&self, segment: usize) -> Option<SegmentRole> {
        self.roles.get(segment).copied()
    }

    /// Changes the role of a segment. A segment backing a defined overlay
    /// range, or holding trace data, cannot change away from its role.
    pub fn set_segment_role(&mut self, segment: usize, role: SegmentRole) -> Result<(), EmuError> {
        let current = *self.roles.get(segment).ok_or(EmuError::NoSuchSegment(segment))?;
        if current == role {
            return Ok(());
        }
        match current {
            SegmentRole::Overlay if self.segment_backs_range(segment) => {
                return Err(EmuError::SegmentInUse { segment, user: "an overlay range" });
            }
            SegmentRole::Trace if !self.trace.is_empty() => {
                return Err(EmuError::SegmentInUse { segment, user: "the active trace buffer" });
            }
            _ => {}
        }
        if role == SegmentRole::Trace && !self.trace.is_empty() {
            return Err(EmuError::SegmentInUse { segment, user: "the active trace buffer" });
        }
        self.roles[segment] = role;
        self.trace.segments = (0..self.roles.len()).filter(|&s| self.roles[s] == SegmentRole::Trace).collect();
        Ok(())
    }

    fn segment_backs_range(&self, segment: usize) -> bool {
        let lo = segment * SEGMENT_SIZE;
        let hi = lo + SEGMENT_SIZE;
        self.ranges.iter().flatten().any(|slot| {
            slot.range.dest.iter().any(|&d| {
                let (d0, d1) = (d as usize, d as usize + slot.range.size as usize);
                d0 < hi && lo < d1
            })
        })
    }

    fn dest_in_overlay(&self, dest: u32, size: u32) -> bool {
        let (lo, hi) = (dest as usize, dest as usize + size as usize);
        if hi > self.bytes.len() {
            return false;
        }
        (lo / SEGMENT_SIZE..=(hi - 1) / SEGMENT_SIZE).all(|s| self.roles[s] == SegmentRole::Overlay)
    }

    /// Stores an overlay range. New ranges start disabled.
    pub fn define_overlay_range(&mut self, range: OverlayRange) -> Result<(), EmuError> {
        let id = range.id;
        if id as usize >= MAX_RANGES {
            return Err(EmuError::RangeId(id));
        }
        let size = range.size;
        if !size.is_power_of_two() || !(MIN_RANGE_SIZE..=MAX_RANGE_SIZE).contains(&size) {
            return Err(EmuError::RangeSize { id, size });
        }
        if !range.flash_base.is_multiple_of(size) {
            return Err(EmuError::RangeAlign { id, base: range.flash_base, size });
        }
        if let Some(slot) = &self.ranges[id as usize] {
            if slot.enabled_after_boundary() || slot.enabled {
                return Err(EmuError::RangeEnabled(id));
            }
        }
        for &d in &range.dest {
            if !self.dest_in_overlay(d, size) {
                return Err(EmuError::RangeDest { id, dest: d });
            }
        }
        let overlaps =
            |a: u32, b: u32, len_a: u32, len_b: u32| (a as u64) < b as u64 + len_b as u64 && (b as u64) < a as u64 + len_a as u64;
        if overlaps(range.dest[0], range.dest[1], size, size) {
            return Err(EmuError::DestOverlap { id, other: id });
        }
        for slot in self.ranges.iter().flatten().filter(|s| s.range.id != id) {
            let o = &slot.range;
            for &d in &range.dest {
                if o.dest.iter().any(|&od| overlaps(d, od, size, o.size)) {
                    return Err(EmuError::DestOverlap { id, other: o.id });
                }
            }
        }
        self.ranges[id as usize] = Some(RangeSlot { range, enabled: false, staged: None });
        Ok(())
    }

    pub fn overlay_range(&self, id: u8) -> Option<OverlayRange> {
        self.ranges.get(id as usize).copied().flatten().map(|s| s.range)
    }

    pub fn ranges(&self) -> impl Iterator<Item = (OverlayRange, bool)> + '_ {
        self.ranges.iter().flatten().map(|s| (s.range, s.enabled))
    }

    /// Stages an enable flag write; effective at the next cycle boundary.
    pub fn set_range_enabled(&mut self, id: u8, enabled: bool) -> Result<(), EmuError> {
        if id as usize >= MAX_RANGES {
            return Err(EmuError::RangeId(id));
        }
        let slot = self.ranges[id as usize].ok_or(EmuError::RangeUndefined(id))?;
        if enabled {
            for other in self.ranges.iter().flatten() {
                if other.range.id != id && other.enabled_after_boundary() && other.range.flash_overlaps(&slot.range) {
                    return Err(EmuError::FlashOverlap { id, other: other.range.id });
                }
            }
        }
        if let Some(s) = self.ranges[id as usize].as_mut() {
            s.staged = Some(enabled);
        }
        Ok(())
    }

    pub fn range_enabled(&self, id: u8) -> bool {
        self.ranges.get(id as usize).copied().flatten().is_some_and(|s| s.enabled)
    }

    /// Stages a page switch for all ranges at once.
    pub fn set_cal_page(&mut self, page: u8) -> Result<(), EmuError> {
        if page > 1 {
            return Err(EmuError::BadPage(page));
        }
        self.staged_page = Some(page);
        Ok(())
    }

    /// The page most recently selected (staged or effective).
    pub fn cal_page(&self) -> u8 {
        self.staged_page.unwrap_or(self.active_page)
    }

    /// The page target accesses currently observe.
    pub fn effective_page(&self) -> u8 {
        self.active_page
    }

    /// Applies staged control writes. Called once at the start of every cycle.
    pub fn begin_cycle(&mut self) {
        if let Some(p) = self.staged_page.take() {
            self.active_page = p;
        }
        for slot in self.ranges.iter_mut().flatten() {
            if let Some(e) = slot.staged.take() {
                slot.enabled = e;
            }
        }
    }

    /// Routes a flash-space address. Pure in (addr, configuration, effective page).
    pub fn translate(&self, addr: u32, flash_latency: u32) -> Routed {
        self.translate_view(addr, flash_latency, false)
    }

    /// Like [`translate`](Self::translate), but as seen from the cycle boundary
    /// with staged control writes already applied. The debug port uses this view.
    pub fn translate_staged(&self, addr: u32, flash_latency: u32) -> Routed {
        self.translate_view(addr, flash_latency, true)
    }

    fn translate_view(&self, addr: u32, flash_latency: u32, staged: bool) -> Routed {
        let page = if staged { self.cal_page() } else { self.active_page };
        for slot in self.ranges.iter().flatten() {
            let enabled = if staged { slot.enabled_after_boundary() } else { slot.enabled };
            if enabled && slot.range.contains(addr) {
                let off = slot.range.dest[page as usize] + (addr - slot.range.flash_base);
                return Routed { target: Route::Emu(off), latency: flash_latency };
            }
        }
        Routed { target: Route::Flash(addr), latency: flash_latency }
    }

    pub fn read(&self, offset: usize, out: &mut [u8]) -> Result<(), EmuError> {
        let end = offset.checked_add(out.len()).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(EmuError::OutOfBounds { offset, len: out.len() })?;
        out.copy_from_slice(&self.bytes[offset..end]);
        Ok(())
    }

    pub fn write(&mut self, offset: usize, data: &[u8]) -> Result<(), EmuError> {
        let end = offset.checked_add(data.len()).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(EmuError::OutOfBounds { offset, len: data.len() })?;
        self.bytes[offset..end].copy_from_slice(data);
        Ok(())
    }

    pub fn read_u32(&self, offset: usize) -> Result<u32, EmuError> {
        let mut b = [0u8; 4];
        self.read(offset, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn reg_read(&self, offset: u32) -> Result<u32, EmuError> {
        if !offset.is_multiple_of(4) {
            return Err(EmuError::Unaligned(offset));
        }
        if offset == regs::PAGE {
            return Ok(self.cal_page() as u32);
        }
        if (regs::RANGE_BASE..regs::WINDOW).contains(&offset) {
            let rel = offset - regs::RANGE_BASE;
            let id = (rel / regs::RANGE_STRIDE) as usize;
            let Some(slot) = self.ranges[id] else { return Ok(0) };
            let r = slot.range;
            return Ok(match rel % regs::RANGE_STRIDE {
                regs::RANGE_CTRL => u32::from(slot.enabled_after_boundary()) | r.size.trailing_zeros() << 8,
                regs::RANGE_FLASH_BASE => r.flash_base,
                regs::RANGE_DEST0 => r.dest[0],
                _ => r.dest[1],
            });
        }
        Ok(0)
    }

    pub fn reg_write(&mut self, offset: u32, value: u32) -> Result<(), EmuError> {
        if !offset.is_multiple_of(4) {
            return Err(EmuError::Unaligned(offset));
        }
        if offset == regs::PAGE {
            return self.set_cal_page((value & 1) as u8);
        }
        if (regs::RANGE_BASE..regs::WINDOW).contains(&offset) {
            let rel = offset - regs::RANGE_BASE;
            if rel % regs::RANGE_STRIDE == regs::RANGE_CTRL {
                return self.set_range_enabled((rel / regs::RANGE_STRIDE) as u8, value & 1 != 0);
            }
        }
        Err(EmuError::ReadOnly(offset))
    }

    pub fn trace(&self) -> &TraceBuffer {
        &self.trace
    }

    pub fn set_trace_mode(&mut self, mode: TraceMode) {
        self.trace.mode = mode;
    }

    /// Appends bytes to the trace buffer. A FILL_ONCE buffer drops whole
    /// appends that do not fit, so stored frames are never cut.
    pub fn trace_append(&mut self, data: &[u8]) -> Result<(), EmuError> {
        let cap = self.trace.capacity();
        if cap == 0 {
            return Err(EmuError::NoTraceSegment);
        }
        match self.trace.mode {
            TraceMode::FillOnce => {
                if self.trace.write_offset + data.len() > cap {
                    self.trace.dropped += 1;
                    return Ok(());
                }
                for &b in data {
                    let p = self.trace.physical(self.trace.write_offset);
                    self.bytes[p] = b;
                    self.trace.write_offset += 1;
                }
            }
            TraceMode::Circular => {
                for &b in data {
                    let p = self.trace.physical(self.trace.write_offset);
                    self.bytes[p] = b;
                    self.trace.write_offset += 1;
                    if self.trace.write_offset == cap {
                        self.trace.write_offset = 0;
                        self.trace.wrapped = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// Trace contents, oldest byte first.
    pub fn trace_read_all(&self) -> Result<Vec<u8>, EmuError> {
        let cap = self.trace.capacity();
        if cap == 0 {
            return Err(EmuError::NoTraceSegment);
        }
        let order = if self.trace.wrapped {
            (self.trace.write_offset..cap).chain(0..self.trace.write_offset)
        } else {
            (0..self.trace.write_offset).chain(0..0)
        };
        Ok(order.map(|pos| self.bytes[self.trace.physical(pos)]).collect())
    }

    /// Empties the trace buffer (contents are not scrubbed).
    pub fn trace_clear(&mut self) {
        self.trace.write_offset = 0;
        self.trace.wrapped = false;
        self.trace.dropped = 0;
    }
}
