//! Two-pass line assembler for the target ISA.
//!
//! ```text
//! ; comment            # also a comment
//! start:  LDI  R1, 5
//!         LUI  R2, 0x2000          ; R2 = 0x2000_0000
//!         ADD  R3, R1, R1
//!         ST   R3, [R2+4]
//!         LD   R4, [R2+4]
//!         BNE  R3, R4, start       ; branch operands are target addresses or labels
//!         JMP  0x200
//!         BKPT
//!         HALT
//! table:  .word 0x12345678
//! ```

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use thiserror::Error;

use crate::isa::{Instruction, Opcode, BKPT_IMM, WORD};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("bad register `{0}` (expected R0..R15)")]
    BadRegister(String),
    #[error("expected {expected} operands, found {found}")]
    OperandCount { expected: usize, found: usize },
    #[error("bad immediate `{0}`")]
    BadImmediate(String),
    #[error("immediate {0} does not fit in 16 bits")]
    ImmediateRange(i64),
    #[error("bad memory operand `{0}` (expected [Rn], [Rn+off] or [Rn-off])")]
    BadMemOperand(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("branch offset {0} not representable")]
    BranchRange(i64),
}

/// An assembled program image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub base: u32,
    pub bytes: Vec<u8>,
    pub symbols: BTreeMap<String, u32>,
}

impl Program {
    pub fn words(&self) -> impl Iterator<Item = u32> + '_ {
        self.bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }
}

struct Line<'a> {
    number: usize,
    mnemonic: &'a str,
    operands: Vec<&'a str>,
}

/// Assemble `source` for loading at `base`.
pub fn assemble(source: &str, base: u32) -> Result<Program, AsmError> {
    let mut symbols = BTreeMap::new();
    let mut lines = Vec::new();
    let mut pc = base;

    for (idx, raw) in source.lines().enumerate() {
        let number = idx + 1;
        let mut text = raw;
        if let Some(p) = text.find([';', '#']) {
            text = &text[..p];
        }
        let mut text = text.trim();
        while let Some(colon) = text.find(':') {
            let label = text[..colon].trim();
            if label.is_empty() || !is_ident(label) {
                break;
            }
            if symbols.insert(label.to_string(), pc).is_some() {
                return Err(AsmError { line: number, kind: AsmErrorKind::DuplicateLabel(label.to_string()) });
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim()),
            None => (text, ""),
        };
        let operands = if rest.is_empty() { Vec::new() } else { split_operands(rest) };
        lines.push(Line { number, mnemonic, operands });
        pc = pc.wrapping_add(WORD);
    }

    let mut bytes = Vec::with_capacity(lines.len() * 4);
    let mut pc = base;
    for line in &lines {
        let word = assemble_line(line, pc, &symbols).map_err(|kind| AsmError { line: line.number, kind })?;
        bytes.extend_from_slice(&word.to_le_bytes());
        pc = pc.wrapping_add(WORD);
    }
    Ok(Program { base, bytes, symbols })
}

fn split_operands(s: &str) -> Vec<&str> {
    // commas inside brackets never occur in valid syntax, a plain split is enough
    s.split(',').map(str::trim).collect()
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn expect(ops: &[&str], n: usize) -> Result<(), AsmErrorKind> {
    if ops.len() != n {
        return Err(AsmErrorKind::OperandCount { expected: n, found: ops.len() });
    }
    Ok(())
}

fn assemble_line(line: &Line<'_>, pc: u32, symbols: &BTreeMap<String, u32>) -> Result<u32, AsmErrorKind> {
    let ops = &line.operands;
    let upper = line.mnemonic.to_ascii_uppercase();
    let insn = match upper.as_str() {
        ".WORD" => {
            expect(ops, 1)?;
            return value(ops[0], symbols).map(|v| v as u32);
        }
        "NOP" => {
            expect(ops, 0)?;
            Instruction::new(Opcode::Nop, 0, 0, 0)
        }
        "HALT" => {
            expect(ops, 0)?;
            Instruction::new(Opcode::Halt, 0, 0, 0)
        }
        "BKPT" => {
            expect(ops, 0)?;
            Instruction::new(Opcode::Halt, 0, 0, BKPT_IMM)
        }
        "LDI" | "LUI" => {
            expect(ops, 2)?;
            let rd = register(ops[0])?;
            let imm = imm16(ops[1], symbols)?;
            Instruction::new(Opcode::Ldi, rd, u8::from(upper == "LUI"), imm)
        }
        "ADD" | "SUB" => {
            expect(ops, 3)?;
            let op = if upper == "ADD" { Opcode::Add } else { Opcode::Sub };
            Instruction::new(op, register(ops[0])?, register(ops[1])?, register(ops[2])? as u16)
        }
        "LD" | "ST" => {
            expect(ops, 2)?;
            let op = if upper == "LD" { Opcode::Ld } else { Opcode::St };
            let (ra, off) = mem_operand(ops[1], symbols)?;
            Instruction::new(op, register(ops[0])?, ra, off)
        }
        "BEQ" | "BNE" => {
            expect(ops, 3)?;
            let op = if upper == "BEQ" { Opcode::Beq } else { Opcode::Bne };
            let off = branch_offset(ops[2], pc, symbols)?;
            Instruction::new(op, register(ops[0])?, register(ops[1])?, off)
        }
        "JMP" => {
            expect(ops, 1)?;
            Instruction::new(Opcode::Jmp, 0, 0, branch_offset(ops[0], pc, symbols)?)
        }
        _ => return Err(AsmErrorKind::UnknownMnemonic(line.mnemonic.to_string())),
    };
    Ok(insn.encode())
}

fn register(s: &str) -> Result<u8, AsmErrorKind> {
    let bad = || AsmErrorKind::BadRegister(s.to_string());
    let digits = s.strip_prefix(['R', 'r']).ok_or_else(bad)?;
    let n: u8 = digits.parse().map_err(|_| bad())?;
    if n > 15 {
        return Err(bad());
    }
    Ok(n)
}

fn number(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b.trim()),
        None => (false, s.strip_prefix('+').unwrap_or(s).trim()),
    };
    let body = body.replace('_', "");
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(h, 16).ok()?
    } else if let Some(b) = body.strip_prefix("0b") {
        i64::from_str_radix(b, 2).ok()?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn value(s: &str, symbols: &BTreeMap<String, u32>) -> Result<i64, AsmErrorKind> {
    if let Some(v) = number(s) {
        return Ok(v);
    }
    if is_ident(s) {
        return symbols.get(s).map(|&a| a as i64).ok_or_else(|| AsmErrorKind::UndefinedLabel(s.to_string()));
    }
    Err(AsmErrorKind::BadImmediate(s.to_string()))
}

fn imm16(s: &str, symbols: &BTreeMap<String, u32>) -> Result<u16, AsmErrorKind> {
    let v = value(s, symbols)?;
    if !(-0x8000..=0xFFFF).contains(&v) {
        return Err(AsmErrorKind::ImmediateRange(v));
    }
    Ok(v as u16)
}

fn mem_operand(s: &str, symbols: &BTreeMap<String, u32>) -> Result<(u8, u16), AsmErrorKind> {
    let bad = || AsmErrorKind::BadMemOperand(s.to_string());
    let inner = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?.trim();
    let split = inner.find(['+', '-']);
    let (reg, off) = match split {
        Some(p) => (inner[..p].trim(), inner[p..].trim()),
        None => (inner, "0"),
    };
    let ra = register(reg)?;
    let off = value(off, symbols)?;
    if !(-0x8000..=0x7FFF).contains(&off) {
        return Err(AsmErrorKind::ImmediateRange(off));
    }
    Ok((ra, off as i16 as u16))
}

fn branch_offset(s: &str, pc: u32, symbols: &BTreeMap<String, u32>) -> Result<u16, AsmErrorKind> {
    let target = value(s, symbols)?;
    let off = target - (pc as i64 + WORD as i64);
    if !(-0x8000..=0x7FFF).contains(&off) || off % 4 != 0 {
        return Err(AsmErrorKind::BranchRange(off));
    }
    Ok(off as i16 as u16)
}
