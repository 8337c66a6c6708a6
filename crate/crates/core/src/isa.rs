//! The target instruction set.
//!
//! Every instruction is one 32-bit word:
//!
//! ```text
//!  31      24 23  20 19  16 15                0
//! +----------+------+------+-------------------+
//! |  opcode  |  rd  |  ra  |       imm16       |
//! +----------+------+------+-------------------+
//! ```
//!
//! R-type operations (`ADD`, `SUB`) take their second source register from
//! `imm16[3:0]`. Branch offsets are signed byte offsets relative to the
//! fall-through address `pc + 4`. `LD`/`ST` address `ra + sext(imm16)`.
//!
//! Two encodings carry extra meaning in otherwise unused fields:
//! `LDI` with `ra = 1` loads `imm16 << 16` (assembler mnemonic `LUI`), and
//! `HALT` with `imm16 = 1` is the software breakpoint word (`BKPT`).

use thiserror::Error;

/// Size in bytes of one instruction word.
pub const WORD: u32 = 4;

/// `HALT` with this immediate stops the core in break state instead of retiring.
pub const BKPT_IMM: u16 = 1;

/// The software breakpoint instruction word.
pub const BKPT_WORD: u32 = (Opcode::Halt as u32) << 24 | BKPT_IMM as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[repr(u8)]
pub enum Opcode {
    Nop = 0x00,
    Ldi = 0x01,
    Add = 0x02,
    Sub = 0x03,
    Ld = 0x04,
    St = 0x05,
    Beq = 0x06,
    Bne = 0x07,
    Jmp = 0x08,
    Halt = 0x09,
}

impl Opcode {
    pub const ALL: [Opcode; 10] =
        [Opcode::Nop, Opcode::Ldi, Opcode::Add, Opcode::Sub, Opcode::Ld, Opcode::St, Opcode::Beq, Opcode::Bne, Opcode::Jmp, Opcode::Halt];

    pub fn from_u8(byte: u8) -> Option<Opcode> {
        Opcode::ALL.get(byte as usize).copied()
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Nop => "NOP",
            Opcode::Ldi => "LDI",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Ld => "LD",
            Opcode::St => "ST",
            Opcode::Beq => "BEQ",
            Opcode::Bne => "BNE",
            Opcode::Jmp => "JMP",
            Opcode::Halt => "HALT",
        }
    }

    /// Instructions that can redirect the program counter.
    pub fn is_branch(self) -> bool {
        matches!(self, Opcode::Beq | Opcode::Bne | Opcode::Jmp)
    }

    pub fn is_memory(self) -> bool {
        matches!(self, Opcode::Ld | Opcode::St)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
}

/// A decoded instruction. Register fields are 4 bits wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: Opcode,
    pub rd: u8,
    pub ra: u8,
    pub imm16: u16,
}

impl Instruction {
    pub fn new(opcode: Opcode, rd: u8, ra: u8, imm16: u16) -> Self {
        debug_assert!(rd < 16 && ra < 16);
        Instruction { opcode, rd: rd & 0xF, ra: ra & 0xF, imm16 }
    }

    pub fn encode(&self) -> u32 {
        (self.opcode as u32) << 24 | ((self.rd & 0xF) as u32) << 20 | ((self.ra & 0xF) as u32) << 16 | self.imm16 as u32
    }

    pub fn decode(word: u32) -> Result<Instruction, DecodeError> {
        let op = (word >> 24) as u8;
        let opcode = Opcode::from_u8(op).ok_or(DecodeError::UnknownOpcode(op))?;
        Ok(Instruction { opcode, rd: ((word >> 20) & 0xF) as u8, ra: ((word >> 16) & 0xF) as u8, imm16: word as u16 })
    }

    /// Second source register of R-type operations.
    pub fn rb(&self) -> u8 {
        (self.imm16 & 0xF) as u8
    }

    pub fn simm(&self) -> i32 {
        self.imm16 as i16 as i32
    }

    /// Branch target for a branch located at `pc`.
    pub fn branch_target(&self, pc: u32) -> u32 {
        pc.wrapping_add(WORD).wrapping_add(self.simm() as u32)
    }

    pub fn is_bkpt(&self) -> bool {
        self.opcode == Opcode::Halt && self.imm16 == BKPT_IMM
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_examples() {
        assert_eq!(Instruction::new(Opcode::Ldi, 1, 0, 5).encode(), 0x0110_0005);
        assert_eq!(Instruction::new(Opcode::Nop, 0, 0, 0).encode(), 0);
        assert_eq!(Instruction::new(Opcode::Halt, 0, 0, 0).encode(), 0x0900_0000);
    }

    #[test]
    fn unknown_opcode_rejected() {
        assert_eq!(Instruction::decode(0x0A00_0000), Err(DecodeError::UnknownOpcode(0x0A)));
        assert_eq!(Instruction::decode(0xFF00_0000), Err(DecodeError::UnknownOpcode(0xFF)));
    }

    #[test]
    fn branch_target_is_fall_through_relative() {
        let j = Instruction::new(Opcode::Jmp, 0, 0, 0xF8);
        assert_eq!(j.branch_target(0x104), 0x200);
        let back = Instruction::new(Opcode::Bne, 1, 3, (-16i16) as u16);
        assert_eq!(back.branch_target(0x10), 0x04);
    }

    proptest::proptest! {
        #[test]
        fn decode_inverts_encode(op in 0u8..10, rd in 0u8..16, ra in 0u8..16, imm: u16) {
            let i = Instruction::new(Opcode::from_u8(op).unwrap(), rd, ra, imm);
            proptest::prop_assert_eq!(Instruction::decode(i.encode()), Ok(i));
        }
    }
}
