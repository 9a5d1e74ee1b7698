//! x86-64 subset decoder and the two disassembly front-ends.
//!
//! The decoder covers one-byte and 0x0F opcodes for mov, lea, push, pop,
//! add, sub, and, or, xor, cmp, test, imul, inc, dec, nop, call, ret, jmp,
//! jcc and leave, with REX, operand-size and segment prefixes, ModRM+SIB and
//! RIP-relative addressing. Anything outside the subset decodes as a 1-byte
//! "db" pseudo-instruction, which keeps both sweeps total on arbitrary
//! bytes.
//!
//! Textual output is NASM-flavored and frozen: one space after the
//! mnemonic, operands joined by bare commas, displacements signed hex,
//! immediates unsigned hex at operand width. Feature strings are built from
//! exactly this text, so changing it invalidates stored feature tables.

mod sweep;

pub use sweep::{code_sweep, linear_sweep, LinearSweep};
pub(crate) use sweep::{function_roots, AnnotationContext};

use std::fmt;

const R64: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12",
    "r13", "r14", "r15",
];
const R32: [&str; 16] = [
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d", "r12d",
    "r13d", "r14d", "r15d",
];
const R16: [&str; 16] = [
    "ax", "cx", "dx", "bx", "sp", "bp", "si", "di", "r8w", "r9w", "r10w", "r11w", "r12w", "r13w",
    "r14w", "r15w",
];
const R8: [&str; 16] = [
    "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b", "r12b",
    "r13b", "r14b", "r15b",
];
const R8_HIGH: [&str; 4] = ["ah", "ch", "dh", "bh"];

const JCC: [&str; 16] = [
    "jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja", "js", "jns", "jp", "jnp", "jl", "jge",
    "jle", "jg",
];

/// Group-1 ALU mnemonics by ModRM reg field; adc and sbb are outside the
/// subset.
const GROUP1: [Option<&str>; 8] = [
    Some("add"),
    Some("or"),
    None,
    None,
    Some("and"),
    Some("sub"),
    Some("xor"),
    Some("cmp"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reg {
    /// Encoded register number 0..15.
    pub index: u8,
    /// Operand width in bytes: 1, 2, 4 or 8.
    pub size: u8,
    /// Legacy ah/ch/dh/bh when true (only meaningful for size 1, index 4..7).
    pub high: bool,
}

impl Reg {
    pub fn new(index: u8, size: u8) -> Self {
        Reg {
            index,
            size,
            high: false,
        }
    }

    pub fn name(&self) -> &'static str {
        let i = self.index as usize;
        match self.size {
            8 => R64[i],
            4 => R32[i],
            2 => R16[i],
            1 => {
                if self.high {
                    R8_HIGH[i - 4]
                } else {
                    R8[i]
                }
            }
            _ => "?",
        }
    }

    /// Inverse of `name`, used by the assembler and the fixture tooling.
    pub fn parse(name: &str) -> Option<Reg> {
        for (size, table) in [(8u8, &R64), (4, &R32), (2, &R16), (1, &R8)] {
            if let Some(i) = table.iter().position(|&n| n == name) {
                return Some(Reg::new(i as u8, size));
            }
        }
        R8_HIGH.iter().position(|&n| n == name).map(|i| Reg {
            index: i as u8 + 4,
            size: 1,
            high: true,
        })
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRef {
    pub seg: Option<&'static str>,
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub scale: u8,
    pub disp: i64,
    /// A displacement field was present in the encoding; zero displacements
    /// still display when explicit (`[rbp+rcx*4+0x0]`).
    pub disp_encoded: bool,
    pub rip_relative: bool,
    /// Width in bytes of the value read or written through this operand.
    pub size: u8,
}

impl MemRef {
    fn fmt_inner(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        if let Some(seg) = self.seg {
            write!(f, "{seg}:")?;
        }
        let mut has_term = false;
        if self.rip_relative {
            write!(f, "rip")?;
            has_term = true;
        }
        if let Some(base) = self.base {
            write!(f, "{base}")?;
            has_term = true;
        }
        if let Some(index) = self.index {
            if has_term {
                write!(f, "+")?;
            }
            write!(f, "{index}")?;
            if self.scale > 1 {
                write!(f, "*{}", self.scale)?;
            }
            has_term = true;
        }
        if !has_term {
            write!(f, "{:#x}", self.disp as u64 & 0xffff_ffff)?;
        } else if self.disp != 0 || self.disp_encoded {
            if self.disp < 0 {
                write!(f, "-{:#x}", self.disp.unsigned_abs())?;
            } else {
                write!(f, "+{:#x}", self.disp)?;
            }
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Reg(Reg),
    /// Immediate: `value` is the sign- or zero-extended semantic value,
    /// `op_size` the operand width it applies to, `enc_width` the encoded
    /// immediate width in bytes.
    Imm {
        value: i64,
        op_size: u8,
        enc_width: u8,
    },
    Mem(MemRef),
    /// Relative branch resolved to its absolute target.
    Rel { target: u64, enc_width: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnnotationKind {
    StringRef,
    SymbolRef,
    CallTarget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub kind: AnnotationKind,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub vaddr: u64,
    pub file_offset: u64,
    pub length: u8,
    pub mnemonic: &'static str,
    pub operands: Vec<Operand>,
    pub annotations: Vec<Annotation>,
}

fn size_keyword(bytes: u8) -> &'static str {
    match bytes {
        1 => "byte",
        2 => "word",
        4 => "dword",
        8 => "qword",
        _ => "?",
    }
}

impl Instruction {
    pub fn is_terminator(&self) -> bool {
        matches!(self.mnemonic, "ret" | "jmp")
    }

    /// True for anything that can move control somewhere else: calls,
    /// returns, and both jump flavors.
    pub fn is_control_transfer(&self) -> bool {
        matches!(self.mnemonic, "call" | "ret" | "jmp") || JCC.contains(&self.mnemonic)
    }

    /// The frozen instruction text that feature strings are built from.
    pub fn text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic)?;
        if self.operands.is_empty() {
            return Ok(());
        }
        // A register operand pins the width, so memory operands only carry
        // a size keyword when no register is present. imul immediates keep
        // their width keyword regardless.
        let has_reg = self
            .operands
            .iter()
            .any(|o| matches!(o, Operand::Reg(_)));
        write!(f, " ")?;
        for (i, op) in self.operands.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            match op {
                Operand::Reg(r) => write!(f, "{r}")?,
                Operand::Mem(m) => {
                    if !has_reg && self.mnemonic != "db" {
                        write!(f, "{} ", size_keyword(m.size))?;
                    }
                    m.fmt_inner(f)?;
                }
                Operand::Imm {
                    value,
                    op_size,
                    enc_width,
                } => {
                    if self.mnemonic == "imul" {
                        write!(f, "{} ", size_keyword(*enc_width))?;
                    }
                    let mask = if *op_size >= 8 {
                        u64::MAX
                    } else {
                        (1u64 << (op_size * 8)) - 1
                    };
                    write!(f, "{:#x}", *value as u64 & mask)?;
                }
                Operand::Rel { target, .. } => write!(f, "{target:#x}")?,
            }
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Option<u8> {
        let b = *self.bytes.get(self.pos)?;
        self.pos += 1;
        Some(b)
    }
    fn i8(&mut self) -> Option<i64> {
        Some(self.u8()? as i8 as i64)
    }
    fn u16(&mut self) -> Option<u64> {
        let b = self.bytes.get(self.pos..self.pos + 2)?;
        self.pos += 2;
        Some(u16::from_le_bytes(b.try_into().unwrap()) as u64)
    }
    fn i32(&mut self) -> Option<i64> {
        let b = self.bytes.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(i32::from_le_bytes(b.try_into().unwrap()) as i64)
    }
    fn u32(&mut self) -> Option<u64> {
        let b = self.bytes.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(u32::from_le_bytes(b.try_into().unwrap()) as u64)
    }
    fn u64(&mut self) -> Option<u64> {
        let b = self.bytes.get(self.pos..self.pos + 8)?;
        self.pos += 8;
        Some(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[derive(Clone, Copy)]
struct Prefixes {
    rex: Option<u8>,
    opsize_16: bool,
    seg: Option<&'static str>,
}

impl Prefixes {
    fn w(&self) -> bool {
        self.rex.is_some_and(|r| r & 8 != 0)
    }
    fn r(&self) -> u8 {
        self.rex.map_or(0, |r| (r >> 2) & 1) << 3
    }
    fn x(&self) -> u8 {
        self.rex.map_or(0, |r| (r >> 1) & 1) << 3
    }
    fn b(&self) -> u8 {
        self.rex.map_or(0, |r| r & 1) << 3
    }
    fn opsize(&self) -> u8 {
        if self.w() {
            8
        } else if self.opsize_16 {
            2
        } else {
            4
        }
    }
    fn reg(&self, index: u8, size: u8) -> Reg {
        if size == 1 && self.rex.is_none() && (4..8).contains(&index) {
            Reg {
                index,
                size: 1,
                high: true,
            }
        } else {
            Reg::new(index, size)
        }
    }
}

enum Rm {
    Reg(Reg),
    Mem(MemRef),
}

/// Decode ModRM (+SIB, +displacement); returns the reg field and the r/m
/// operand sized `rm_size`.
fn modrm(cur: &mut Cursor, pfx: &Prefixes, rm_size: u8) -> Option<(u8, Rm)> {
    let byte = cur.u8()?;
    let mode = byte >> 6;
    let reg_field = ((byte >> 3) & 7) | pfx.r();
    let rm = byte & 7;

    if mode == 3 {
        return Some((reg_field, Rm::Reg(pfx.reg(rm | pfx.b(), rm_size))));
    }

    let mut mem = MemRef {
        seg: pfx.seg,
        base: None,
        index: None,
        scale: 1,
        disp: 0,
        disp_encoded: false,
        rip_relative: false,
        size: rm_size,
    };

    if rm == 4 {
        // SIB byte.
        let sib = cur.u8()?;
        let scale = 1u8 << (sib >> 6);
        let index = ((sib >> 3) & 7) | pfx.x();
        let base = (sib & 7) | pfx.b();
        if index != 4 {
            mem.index = Some(Reg::new(index, 8));
            mem.scale = scale;
        }
        if (base & 7) == 5 && mode == 0 {
            mem.disp = cur.i32()?;
            mem.disp_encoded = true;
        } else {
            mem.base = Some(Reg::new(base, 8));
        }
    } else if rm == 5 && mode == 0 {
        mem.rip_relative = true;
        mem.disp = cur.i32()?;
        mem.disp_encoded = true;
    } else {
        mem.base = Some(Reg::new(rm | pfx.b(), 8));
    }

    match mode {
        1 => {
            mem.disp += cur.i8()?;
            mem.disp_encoded = true;
        }
        2 => {
            mem.disp += cur.i32()?;
            mem.disp_encoded = true;
        }
        _ => {}
    }
    Some((reg_field, Rm::Mem(mem)))
}

fn rm_operand(rm: Rm) -> Operand {
    match rm {
        Rm::Reg(r) => Operand::Reg(r),
        Rm::Mem(m) => Operand::Mem(m),
    }
}

fn imm_operand(cur: &mut Cursor, enc_width: u8, op_size: u8) -> Option<Operand> {
    let value = match enc_width {
        1 => cur.i8()?,
        2 => cur.u16()? as i64,
        4 => cur.i32()?,
        8 => cur.u64()? as i64,
        _ => return None,
    };
    Some(Operand::Imm {
        value,
        op_size,
        enc_width,
    })
}

fn try_decode(b: &[u8], vaddr: u64) -> Option<(&'static str, Vec<Operand>, usize)> {
    let mut cur = Cursor { bytes: b, pos: 0 };
    let mut pfx = Prefixes {
        rex: None,
        opsize_16: false,
        seg: None,
    };
    loop {
        if cur.pos >= 14 {
            return None;
        }
        match *cur.bytes.get(cur.pos)? {
            0x66 => {
                pfx.opsize_16 = true;
                pfx.rex = None;
            }
            0x26 => {
                pfx.seg = Some("es");
                pfx.rex = None;
            }
            0x2e => {
                pfx.seg = Some("cs");
                pfx.rex = None;
            }
            0x36 => {
                pfx.seg = Some("ss");
                pfx.rex = None;
            }
            0x3e => {
                pfx.seg = Some("ds");
                pfx.rex = None;
            }
            0x64 => {
                pfx.seg = Some("fs");
                pfx.rex = None;
            }
            0x65 => {
                pfx.seg = Some("gs");
                pfx.rex = None;
            }
            r @ 0x40..=0x4f => pfx.rex = Some(r),
            _ => break,
        }
        cur.pos += 1;
    }

    let opcode = cur.u8()?;
    let opsize = pfx.opsize();
    let rel = |cur: &mut Cursor, width: u8| -> Option<Operand> {
        let disp = match width {
            1 => cur.i8()?,
            4 => cur.i32()?,
            _ => return None,
        };
        Some(Operand::Rel {
            target: vaddr
                .wrapping_add(cur.pos as u64)
                .wrapping_add(disp as u64),
            enc_width: width,
        })
    };

    let decoded: (&'static str, Vec<Operand>) = match opcode {
        // ALU family: add or and sub xor cmp, in the standard 6-opcode
        // pattern.
        0x00 | 0x08 | 0x20 | 0x28 | 0x30 | 0x38 | 0x01 | 0x09 | 0x21 | 0x29 | 0x31 | 0x39
        | 0x02 | 0x0a | 0x22 | 0x2a | 0x32 | 0x3a | 0x03 | 0x0b | 0x23 | 0x2b | 0x33 | 0x3b
        | 0x04 | 0x0c | 0x24 | 0x2c | 0x34 | 0x3c | 0x05 | 0x0d | 0x25 | 0x2d | 0x35 | 0x3d => {
            let mn = match opcode & 0xf8 {
                0x00 => "add",
                0x08 => "or",
                0x20 => "and",
                0x28 => "sub",
                0x30 => "xor",
                0x38 => "cmp",
                _ => return None,
            };
            let ops = match opcode & 7 {
                0 => {
                    let (reg, rm) = modrm(&mut cur, &pfx, 1)?;
                    vec![rm_operand(rm), Operand::Reg(pfx.reg(reg, 1))]
                }
                1 => {
                    let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
                    vec![rm_operand(rm), Operand::Reg(pfx.reg(reg, opsize))]
                }
                2 => {
                    let (reg, rm) = modrm(&mut cur, &pfx, 1)?;
                    vec![Operand::Reg(pfx.reg(reg, 1)), rm_operand(rm)]
                }
                3 => {
                    let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
                    vec![Operand::Reg(pfx.reg(reg, opsize)), rm_operand(rm)]
                }
                4 => vec![Operand::Reg(Reg::new(0, 1)), imm_operand(&mut cur, 1, 1)?],
                5 => vec![
                    Operand::Reg(Reg::new(0, opsize)),
                    imm_operand(&mut cur, if opsize == 2 { 2 } else { 4 }, opsize)?,
                ],
                _ => return None,
            };
            (mn, ops)
        }
        // push/pop default to 64-bit in long mode; 66 narrows them to 16.
        0x50..=0x57 => (
            "push",
            vec![Operand::Reg(Reg::new(
                (opcode & 7) | pfx.b(),
                if pfx.opsize_16 { 2 } else { 8 },
            ))],
        ),
        0x58..=0x5f => (
            "pop",
            vec![Operand::Reg(Reg::new(
                (opcode & 7) | pfx.b(),
                if pfx.opsize_16 { 2 } else { 8 },
            ))],
        ),
        0x68 => ("push", vec![imm_operand(&mut cur, 4, 8)?]),
        0x6a => ("push", vec![imm_operand(&mut cur, 1, 8)?]),
        0x69 => {
            let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
            let imm = imm_operand(&mut cur, if opsize == 2 { 2 } else { 4 }, opsize)?;
            (
                "imul",
                vec![Operand::Reg(pfx.reg(reg, opsize)), rm_operand(rm), imm],
            )
        }
        0x6b => {
            let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
            let imm = imm_operand(&mut cur, 1, opsize)?;
            (
                "imul",
                vec![Operand::Reg(pfx.reg(reg, opsize)), rm_operand(rm), imm],
            )
        }
        0x70..=0x7f => (JCC[(opcode & 0xf) as usize], vec![rel(&mut cur, 1)?]),
        0x80 | 0x81 | 0x83 => {
            let size = if opcode == 0x80 { 1 } else { opsize };
            let (reg, rm) = modrm(&mut cur, &pfx, size)?;
            let mn = GROUP1[(reg & 7) as usize]?;
            let imm = match opcode {
                0x80 => imm_operand(&mut cur, 1, 1)?,
                0x81 => imm_operand(&mut cur, if size == 2 { 2 } else { 4 }, size)?,
                _ => imm_operand(&mut cur, 1, size)?,
            };
            (mn, vec![rm_operand(rm), imm])
        }
        0x84 => {
            let (reg, rm) = modrm(&mut cur, &pfx, 1)?;
            ("test", vec![rm_operand(rm), Operand::Reg(pfx.reg(reg, 1))])
        }
        0x85 => {
            let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
            (
                "test",
                vec![rm_operand(rm), Operand::Reg(pfx.reg(reg, opsize))],
            )
        }
        0x88 => {
            let (reg, rm) = modrm(&mut cur, &pfx, 1)?;
            ("mov", vec![rm_operand(rm), Operand::Reg(pfx.reg(reg, 1))])
        }
        0x89 => {
            let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
            (
                "mov",
                vec![rm_operand(rm), Operand::Reg(pfx.reg(reg, opsize))],
            )
        }
        0x8a => {
            let (reg, rm) = modrm(&mut cur, &pfx, 1)?;
            ("mov", vec![Operand::Reg(pfx.reg(reg, 1)), rm_operand(rm)])
        }
        0x8b => {
            let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
            (
                "mov",
                vec![Operand::Reg(pfx.reg(reg, opsize)), rm_operand(rm)],
            )
        }
        0x8d => {
            let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
            match rm {
                Rm::Mem(m) => ("lea", vec![Operand::Reg(pfx.reg(reg, opsize)), Operand::Mem(m)]),
                Rm::Reg(_) => return None,
            }
        }
        0x8f => {
            let (reg, rm) = modrm(&mut cur, &pfx, 8)?;
            if reg & 7 != 0 {
                return None;
            }
            ("pop", vec![rm_operand(rm)])
        }
        0x90 => {
            if pfx.rex.is_some() || pfx.opsize_16 || pfx.seg.is_some() {
                return None;
            }
            ("nop", vec![])
        }
        0xa8 => (
            "test",
            vec![Operand::Reg(Reg::new(0, 1)), imm_operand(&mut cur, 1, 1)?],
        ),
        0xa9 => (
            "test",
            vec![
                Operand::Reg(Reg::new(0, opsize)),
                imm_operand(&mut cur, if opsize == 2 { 2 } else { 4 }, opsize)?,
            ],
        ),
        0xb0..=0xb7 => (
            "mov",
            vec![
                Operand::Reg(pfx.reg((opcode & 7) | pfx.b(), 1)),
                imm_operand(&mut cur, 1, 1)?,
            ],
        ),
        0xb8..=0xbf => {
            let reg = Operand::Reg(Reg::new((opcode & 7) | pfx.b(), opsize));
            let imm = if pfx.w() {
                imm_operand(&mut cur, 8, 8)?
            } else if opsize == 2 {
                imm_operand(&mut cur, 2, 2)?
            } else {
                // Plain mov r32, imm32 zero-extends; keep the value unsigned.
                let v = cur.u32()? as i64;
                Operand::Imm {
                    value: v,
                    op_size: 4,
                    enc_width: 4,
                }
            };
            ("mov", vec![reg, imm])
        }
        0xc2 => ("ret", vec![imm_operand(&mut cur, 2, 2)?]),
        0xc3 => ("ret", vec![]),
        0xc6 => {
            let (reg, rm) = modrm(&mut cur, &pfx, 1)?;
            if reg & 7 != 0 {
                return None;
            }
            ("mov", vec![rm_operand(rm), imm_operand(&mut cur, 1, 1)?])
        }
        0xc7 => {
            let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
            if reg & 7 != 0 {
                return None;
            }
            let imm = imm_operand(&mut cur, if opsize == 2 { 2 } else { 4 }, opsize)?;
            ("mov", vec![rm_operand(rm), imm])
        }
        0xc9 => ("leave", vec![]),
        0xe8 => ("call", vec![rel(&mut cur, 4)?]),
        0xe9 => ("jmp", vec![rel(&mut cur, 4)?]),
        0xeb => ("jmp", vec![rel(&mut cur, 1)?]),
        0xf6 | 0xf7 => {
            let size = if opcode == 0xf6 { 1 } else { opsize };
            let (reg, rm) = modrm(&mut cur, &pfx, size)?;
            match reg & 7 {
                0 | 1 => {
                    let imm = if size == 1 {
                        imm_operand(&mut cur, 1, 1)?
                    } else {
                        imm_operand(&mut cur, if size == 2 { 2 } else { 4 }, size)?
                    };
                    ("test", vec![rm_operand(rm), imm])
                }
                5 => ("imul", vec![rm_operand(rm)]),
                _ => return None,
            }
        }
        0xfe => {
            let (reg, rm) = modrm(&mut cur, &pfx, 1)?;
            match reg & 7 {
                0 => ("inc", vec![rm_operand(rm)]),
                1 => ("dec", vec![rm_operand(rm)]),
                _ => return None,
            }
        }
        0xff => {
            let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
            match reg & 7 {
                0 => ("inc", vec![rm_operand(rm)]),
                1 => ("dec", vec![rm_operand(rm)]),
                2 => {
                    let (_, rm64) = (reg, resize_rm(rm, 8));
                    ("call", vec![rm_operand(rm64)])
                }
                4 => ("jmp", vec![rm_operand(resize_rm(rm, 8))]),
                6 => ("push", vec![rm_operand(resize_rm(rm, 8))]),
                _ => return None,
            }
        }
        0x0f => {
            let op2 = cur.u8()?;
            match op2 {
                0x1f => {
                    let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
                    if reg & 7 != 0 {
                        return None;
                    }
                    ("nop", vec![rm_operand(rm)])
                }
                0x80..=0x8f => (JCC[(op2 & 0xf) as usize], vec![rel(&mut cur, 4)?]),
                0xaf => {
                    let (reg, rm) = modrm(&mut cur, &pfx, opsize)?;
                    (
                        "imul",
                        vec![Operand::Reg(pfx.reg(reg, opsize)), rm_operand(rm)],
                    )
                }
                _ => return None,
            }
        }
        _ => return None,
    };

    if cur.pos > 15 {
        return None;
    }
    let (mn, ops) = decoded;
    Some((mn, ops, cur.pos))
}

fn resize_rm(rm: Rm, size: u8) -> Rm {
    match rm {
        Rm::Reg(r) => Rm::Reg(Reg::new(r.index, size)),
        Rm::Mem(mut m) => {
            m.size = size;
            Rm::Mem(m)
        }
    }
}

/// Decode the instruction at `bytes[offset..]`. Never fails: bytes outside
/// the supported subset come back as a 1-byte "db" pseudo-instruction.
pub fn decode_one(bytes: &[u8], offset: usize, vaddr: u64) -> Instruction {
    debug_assert!(offset < bytes.len());
    match try_decode(&bytes[offset..], vaddr) {
        Some((mnemonic, operands, length)) => Instruction {
            vaddr,
            file_offset: offset as u64,
            length: length as u8,
            mnemonic,
            operands,
            annotations: Vec::new(),
        },
        None => Instruction {
            vaddr,
            file_offset: offset as u64,
            length: 1,
            mnemonic: "db",
            operands: vec![Operand::Imm {
                value: bytes[offset] as i64,
                op_size: 1,
                enc_width: 1,
            }],
            annotations: Vec::new(),
        },
    }
}
