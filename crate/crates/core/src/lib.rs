//! Cycle-deterministic model of a multi-core debug and trace subsystem.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. It contains:
//!
//! - [`isa`] / [`asm`]: a small 10-opcode instruction set and its assembler.
//! - [`machine`]: the simulated target (cores, a DMA master, shared bus, flash, RAM)
//!   with a zero-intrusion debug port.
//! - [`trigger`]: per-source trigger blocks (comparators, counter state machines,
//!   trace qualification).
//! - [`xtrig`]: the cross-trigger matrix and break/suspend switch.
//! - [`timestamp`]: cycle stamping, timestamp unwrapping and multi-source merge.
//! - [`codec`]: compressed program/data trace messages and their wire frames.
//! - [`emu`]: emulation RAM with overlay ranges, calibration pages and trace buffers.
//! - [`xcp`]: a calibration protocol server and latency-accounted transports.
//! - [`soc`]: the glue that runs the target with the full debug fabric attached.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod asm;
pub mod codec;
pub mod emu;
pub mod isa;
pub mod machine;
pub mod soc;
pub mod timestamp;
pub mod trigger;
pub mod xcp;
pub mod xtrig;

mod varint;

pub use isa::{Instruction, Opcode};
pub use machine::{CoreMode, CycleEvents, Machine, MachineConfig, MasterId};

pub use soc::{DebugConfig, DebugSoc};
