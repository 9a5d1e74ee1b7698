//! Mini-assembler for the decoder subset, plus the byte-level helpers the
//! trampoline builder uses (fixed encodings and instruction relocation).
//!
//! `assemble_feature` turns a normalized feature string back into machine
//! code. Placeholder tokens ("hexadecimal", "number") have lost their
//! concrete values, so the assembler draws fresh ones from the caller's
//! RNG. Draw ranges are constrained so the result re-normalizes to exactly
//! the input string, and, when an `AsmEnv` marks the code as
//! annotation-sensitive, so immediates and RIP-relative targets land
//! outside every mapped section, where the sweep cannot attach an
//! annotation the feature string does not carry. Every assembly is checked
//! by decoding it back before it is returned.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decode_one, Instruction, Operand, Reg};
use crate::features::normalize_tokens;

pub(crate) type AsmResult<T> = Result<T, String>;

/// Placement context for materialized values.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AsmEnv {
    /// An unmapped address below every section; address-like immediates and
    /// negative RIP displacements resolve here.
    pub low_hole: u64,
    /// An unmapped address above every section; positive RIP displacements
    /// resolve here.
    pub high_hole: u64,
    /// True when the bytes will be seen by the annotating code sweep, which
    /// forces targets into the holes. Linear-only payloads are never
    /// annotated and can use unconstrained draws.
    pub annotation_safe: bool,
}

impl AsmEnv {
    /// Payload destined for a non-code section: only the linear sweep reads
    /// it, and the linear sweep never annotates.
    pub fn linear() -> AsmEnv {
        AsmEnv {
            low_hole: 0x10,
            high_hole: 0x7fff_0000,
            annotation_safe: false,
        }
    }
}

/// Single bytes that fail to decode and so display as "db"; none of them is
/// a prefix, and none starts a supported opcode.
const DB_POOL: [u8; 12] = [
    0x06, 0x07, 0x0e, 0x16, 0x17, 0x1e, 0x27, 0x2f, 0x37, 0x3f, 0xd6, 0xf1,
];

const SEGS: [(&str, u8); 6] = [
    ("es", 0x26),
    ("cs", 0x2e),
    ("ss", 0x36),
    ("ds", 0x3e),
    ("fs", 0x64),
    ("gs", 0x65),
];

const JCC: [&str; 16] = [
    "jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja", "js", "jns", "jp", "jnp", "jl", "jge",
    "jle", "jg",
];

fn size_of_keyword(kw: &str) -> Option<u8> {
    match kw {
        "byte" => Some(1),
        "word" => Some(2),
        "dword" => Some(4),
        "qword" => Some(8),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Parsing normalized feature text.

#[derive(Debug, Clone)]
enum POp {
    Reg(Reg),
    /// Bare "hexadecimal" placeholder, optionally behind a width keyword
    /// ("dword hexadecimal" in three-operand imul).
    Imm { size_kw: Option<u8> },
    Mem(PMem),
}

#[derive(Debug, Clone, Default)]
struct PMem {
    size_kw: Option<u8>,
    seg: Option<u8>,
    rip: bool,
    base: Option<Reg>,
    index: Option<Reg>,
    /// "*number" was present; the scale materializes as 2, 4 or 8 (scale 1
    /// never displays).
    scaled: bool,
    /// +hexadecimal / -hexadecimal / bare [hexadecimal].
    disp: Option<DispKind>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DispKind {
    Pos,
    Neg,
    Abs,
}

fn parse_mem(inner: &str) -> AsmResult<PMem> {
    let mut mem = PMem::default();
    let mut rest = inner;
    for (name, byte) in SEGS {
        if let Some(r) = rest.strip_prefix(&format!("{name}:")) {
            mem.seg = Some(byte);
            rest = r;
            break;
        }
    }
    // Terms are +/- separated; the leading term has an implicit +.
    let mut terms: Vec<(bool, &str)> = Vec::new();
    let mut start = 0;
    let mut neg = false;
    for (i, c) in rest.char_indices() {
        if c == '+' || c == '-' {
            if i > start {
                terms.push((neg, &rest[start..i]));
            }
            neg = c == '-';
            start = i + 1;
        }
    }
    if start < rest.len() {
        terms.push((neg, &rest[start..]));
    }
    for (neg, term) in terms {
        if term == "rip" {
            if neg {
                return Err("negated rip term".into());
            }
            mem.rip = true;
        } else if let Some((reg, scale)) = term.split_once('*') {
            let r = Reg::parse(reg).ok_or_else(|| format!("bad index register {reg:?}"))?;
            if scale != "number" {
                return Err(format!("unexpected scale token {scale:?}"));
            }
            if neg || mem.index.is_some() {
                return Err(format!("unsupported memory term {term:?}"));
            }
            mem.index = Some(r);
            mem.scaled = true;
        } else if let Some(r) = Reg::parse(term) {
            if neg {
                return Err(format!("negated register term {term:?}"));
            }
            if mem.base.is_none() && mem.index.is_none() {
                mem.base = Some(r);
            } else if mem.index.is_none() {
                mem.index = Some(r);
            } else {
                return Err(format!("too many register terms in [{inner}]"));
            }
        } else if term == "hexadecimal" {
            if mem.disp.is_some() {
                return Err(format!("two displacement terms in [{inner}]"));
            }
            let bare = !mem.rip && mem.base.is_none() && mem.index.is_none();
            mem.disp = Some(if bare {
                DispKind::Abs
            } else if neg {
                DispKind::Neg
            } else {
                DispKind::Pos
            });
        } else {
            return Err(format!("unsupported memory term {term:?}"));
        }
    }
    if mem.rip && (mem.base.is_some() || mem.index.is_some()) {
        return Err("rip combined with registers".into());
    }
    Ok(mem)
}

fn parse_operand(raw: &str) -> AsmResult<POp> {
    let raw = raw.trim();
    if let Some(r) = Reg::parse(raw) {
        return Ok(POp::Reg(r));
    }
    if raw == "hexadecimal" {
        return Ok(POp::Imm { size_kw: None });
    }
    if raw == "number" {
        // The decoder prints immediates in hex; a bare decimal placeholder
        // cannot have come from it.
        return Err("decimal immediate placeholder".into());
    }
    if let Some(inner) = raw.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| format!("unterminated memory operand {raw:?}"))?;
        return Ok(POp::Mem(parse_mem(inner)?));
    }
    if let Some((kw, rest)) = raw.split_once(' ') {
        if let Some(size) = size_of_keyword(kw) {
            let rest = rest.trim();
            if rest == "hexadecimal" {
                return Ok(POp::Imm {
                    size_kw: Some(size),
                });
            }
            if let Some(inner) = rest.strip_prefix('[') {
                let inner = inner
                    .strip_suffix(']')
                    .ok_or_else(|| format!("unterminated memory operand {raw:?}"))?;
                let mut mem = parse_mem(inner)?;
                mem.size_kw = Some(size);
                return Ok(POp::Mem(mem));
            }
        }
    }
    Err(format!("unsupported operand {raw:?}"))
}

fn parse_insn(text: &str) -> AsmResult<(String, Vec<POp>)> {
    let text = text.trim();
    let (mn, rest) = match text.split_once(' ') {
        Some((m, r)) => (m, r),
        None => (text, ""),
    };
    if mn.is_empty() {
        return Err("empty instruction".into());
    }
    let mut ops = Vec::new();
    if !rest.is_empty() {
        // Commas never occur inside the bracket grammar, so a flat split is
        // exact.
        for part in rest.split(',') {
            ops.push(parse_operand(part)?);
        }
    }
    Ok((mn.to_string(), ops))
}

// ---------------------------------------------------------------------------
// Materialization: placeholders become concrete values.

#[derive(Debug, Clone)]
enum COp {
    Reg(Reg),
    Imm { value: i64, size_kw: Option<u8> },
    Mem(CMem),
    /// call/jmp/jcc placeholder target; resolves to the instruction's own
    /// address, which no symbol or stub pattern can claim.
    RelSelf,
}

#[derive(Debug, Clone)]
struct CMem {
    size_kw: Option<u8>,
    seg: Option<u8>,
    rip: bool,
    rip_positive: bool,
    base: Option<Reg>,
    index: Option<(Reg, u8)>,
    disp: i64,
    abs: bool,
}

fn materialize(
    mn: &str,
    ops: &[POp],
    env: &AsmEnv,
    rng: &mut ChaCha8Rng,
) -> AsmResult<Vec<COp>> {
    let imm_hi = if env.annotation_safe {
        // Keep address-like immediates below every section so the sweep's
        // absolute-immediate probe finds nothing.
        env.low_hole.clamp(1, 0x7f) as i64
    } else {
        0x7f
    };
    let is_branch = mn == "call" || mn == "jmp" || JCC.contains(&mn);
    let mut out = Vec::new();
    for op in ops {
        out.push(match op {
            POp::Reg(r) => COp::Reg(*r),
            POp::Imm { size_kw } => {
                if is_branch && size_kw.is_none() {
                    COp::RelSelf
                } else {
                    COp::Imm {
                        value: rng.gen_range(1..=imm_hi),
                        size_kw: *size_kw,
                    }
                }
            }
            POp::Mem(m) => {
                let scale = if m.scaled {
                    [2u8, 4, 8][rng.gen_range(0..3)]
                } else {
                    1
                };
                let disp = match m.disp {
                    None => 0,
                    Some(DispKind::Abs) => rng.gen_range(0x10..=imm_hi.max(0x10)),
                    Some(DispKind::Pos) => rng.gen_range(0x10..=0x7f),
                    Some(DispKind::Neg) => -rng.gen_range(0x10..=0x7f),
                };
                COp::Mem(CMem {
                    size_kw: m.size_kw,
                    seg: m.seg,
                    rip: m.rip,
                    rip_positive: matches!(m.disp, Some(DispKind::Pos)),
                    base: m.base,
                    index: m.index.map(|r| (r, scale)),
                    disp,
                    abs: matches!(m.disp, Some(DispKind::Abs))
                        && m.base.is_none()
                        && m.index.is_none()
                        && !m.rip,
                })
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Encoding.

#[derive(Default)]
struct Enc {
    seg: Option<u8>,
    size66: bool,
    rex_w: bool,
    rex_r: bool,
    rex_x: bool,
    rex_b: bool,
    /// spl/bpl/sil/dil need a REX byte even with no bits set.
    rex_force: bool,
    /// ah/ch/dh/bh cannot coexist with any REX byte.
    rex_forbid: bool,
    opcode: Vec<u8>,
    modrm: Option<u8>,
    sib: Option<u8>,
    disp: Vec<u8>,
    imm: Vec<u8>,
}

impl Enc {
    fn note_byte_reg(&mut self, r: Reg) {
        if r.size == 1 {
            if r.high {
                self.rex_forbid = true;
            } else if (4..8).contains(&r.index) {
                self.rex_force = true;
            }
        }
    }

    fn set_reg_field(&mut self, r: Reg) {
        self.note_byte_reg(r);
        if r.index >= 8 {
            self.rex_r = true;
        }
        let modrm = self.modrm.unwrap_or(0);
        self.modrm = Some(modrm | ((r.index & 7) << 3));
    }

    fn set_reg_digit(&mut self, digit: u8) {
        let modrm = self.modrm.unwrap_or(0);
        self.modrm = Some(modrm | ((digit & 7) << 3));
    }

    fn set_rm_reg(&mut self, r: Reg) {
        self.note_byte_reg(r);
        if r.index >= 8 {
            self.rex_b = true;
        }
        let modrm = self.modrm.unwrap_or(0);
        self.modrm = Some(modrm | 0xc0 | (r.index & 7));
    }

    fn set_rm_mem(&mut self, m: &CMem) -> AsmResult<()> {
        self.seg = m.seg;
        let modrm = self.modrm.unwrap_or(0);
        if m.rip {
            self.modrm = Some(modrm | 0x05);
            let disp: i32 = m
                .disp
                .try_into()
                .map_err(|_| "rip displacement exceeds 32 bits".to_string())?;
            self.disp = disp.to_le_bytes().to_vec();
            return Ok(());
        }
        if m.abs || (m.base.is_none() && m.index.is_none()) {
            // Absolute: SIB with no base, no index, disp32.
            self.modrm = Some(modrm | 0x04);
            self.sib = Some(0x25);
            let disp: i32 = m
                .disp
                .try_into()
                .map_err(|_| "absolute displacement exceeds 32 bits".to_string())?;
            self.disp = disp.to_le_bytes().to_vec();
            return Ok(());
        }
        if let Some((index, _)) = m.index {
            if index.index & 7 == 4 && index.index < 8 {
                return Err("rsp cannot index".into());
            }
        }
        let need_sib = m.index.is_some() || m.base.is_some_and(|b| b.index & 7 == 4);
        let (mode, disp): (u8, Vec<u8>) = if let Some(b) = m.base {
            let b7 = b.index & 7;
            if m.disp == 0 && b7 != 5 {
                (0x00, Vec::new())
            } else if let Ok(d8) = i8::try_from(m.disp) {
                (0x40, vec![d8 as u8])
            } else {
                let d: i32 = m
                    .disp
                    .try_into()
                    .map_err(|_| "displacement exceeds 32 bits".to_string())?;
                (0x80, d.to_le_bytes().to_vec())
            }
        } else {
            // Index without base forces mod 00 + disp32 through SIB base 101.
            (0x00, (m.disp as i32).to_le_bytes().to_vec())
        };
        self.disp = disp;
        if need_sib {
            self.modrm = Some(modrm | mode | 0x04);
            let scale_bits = match m.index.map(|(_, s)| s).unwrap_or(1) {
                1 => 0u8,
                2 => 1,
                4 => 2,
                8 => 3,
                s => return Err(format!("bad scale {s}")),
            };
            let idx = match m.index {
                Some((r, _)) => {
                    if r.index >= 8 {
                        self.rex_x = true;
                    }
                    r.index & 7
                }
                None => 4,
            };
            let base = match m.base {
                Some(b) => {
                    if b.index >= 8 {
                        self.rex_b = true;
                    }
                    b.index & 7
                }
                None => 5,
            };
            self.sib = Some((scale_bits << 6) | (idx << 3) | base);
        } else {
            let b = m.base.unwrap();
            if b.index >= 8 {
                self.rex_b = true;
            }
            self.modrm = Some(modrm | mode | (b.index & 7));
        }
        Ok(())
    }

    fn emit(&self) -> AsmResult<Vec<u8>> {
        let rex_bits = (self.rex_w as u8) << 3
            | (self.rex_r as u8) << 2
            | (self.rex_x as u8) << 1
            | self.rex_b as u8;
        if self.rex_forbid && (rex_bits != 0 || self.rex_force) {
            return Err("high byte register conflicts with REX".into());
        }
        let mut out = Vec::new();
        if let Some(seg) = self.seg {
            out.push(seg);
        }
        if self.size66 {
            out.push(0x66);
        }
        if rex_bits != 0 || self.rex_force {
            out.push(0x40 | rex_bits);
        }
        out.extend_from_slice(&self.opcode);
        if let Some(m) = self.modrm {
            out.push(m);
        }
        if let Some(s) = self.sib {
            out.push(s);
        }
        out.extend_from_slice(&self.disp);
        out.extend_from_slice(&self.imm);
        Ok(out)
    }
}

fn width_prefixes(enc: &mut Enc, size: u8) {
    match size {
        2 => enc.size66 = true,
        8 => enc.rex_w = true,
        _ => {}
    }
}

fn imm_bytes(value: i64, width: u8) -> Vec<u8> {
    match width {
        1 => vec![value as u8],
        2 => (value as u16).to_le_bytes().to_vec(),
        4 => (value as u32).to_le_bytes().to_vec(),
        8 => value.to_le_bytes().to_vec(),
        _ => unreachable!("imm width {width}"),
    }
}

fn mem_size(m: &CMem, partner: Option<u8>) -> AsmResult<u8> {
    m.size_kw
        .or(partner)
        .ok_or_else(|| "memory operand with no width".to_string())
}

struct AluSpec {
    base: u8,
    digit: u8,
}

fn alu_spec(mn: &str) -> Option<AluSpec> {
    let (base, digit) = match mn {
        "add" => (0x00, 0),
        "or" => (0x08, 1),
        "and" => (0x20, 4),
        "sub" => (0x28, 5),
        "xor" => (0x30, 6),
        "cmp" => (0x38, 7),
        _ => return None,
    };
    Some(AluSpec { base, digit })
}

/// Encode instructions of the shape `op rm, reg` / `op reg, rm` with a
/// standard 1-byte opcode pair (byte form, wider form).
fn encode_rm_reg(opcode_byte: u8, opcode_wide: u8, rm: &COp, reg: Reg) -> AsmResult<Vec<u8>> {
    let mut e = Enc::default();
    width_prefixes(&mut e, reg.size);
    e.opcode = vec![if reg.size == 1 { opcode_byte } else { opcode_wide }];
    e.set_reg_field(reg);
    match rm {
        COp::Reg(r) => {
            if r.size != reg.size {
                return Err("register width mismatch".into());
            }
            e.set_rm_reg(*r);
        }
        COp::Mem(m) => e.set_rm_mem(m)?,
        _ => return Err("bad rm operand".into()),
    }
    e.emit()
}

/// Encode `op rm, imm` through a /digit group opcode.
fn encode_rm_imm(
    opcode_byte: u8,
    opcode_wide: u8,
    digit: u8,
    rm: &COp,
    size: u8,
    value: i64,
    imm_width: u8,
) -> AsmResult<Vec<u8>> {
    let mut e = Enc::default();
    width_prefixes(&mut e, size);
    e.opcode = vec![if size == 1 { opcode_byte } else { opcode_wide }];
    e.set_reg_digit(digit);
    match rm {
        COp::Reg(r) => e.set_rm_reg(*r),
        COp::Mem(m) => e.set_rm_mem(m)?,
        _ => return Err("bad rm operand".into()),
    }
    e.imm = imm_bytes(value, imm_width);
    e.emit()
}

fn encode(mn: &str, ops: &[COp], vaddr: u64, rng: &mut ChaCha8Rng) -> AsmResult<Vec<u8>> {
    if let Some(cc) = JCC.iter().position(|&j| j == mn) {
        return match ops {
            [COp::RelSelf] => {
                // Target the instruction itself: rel32 = -(length).
                let mut out = vec![0x0f, 0x80 | cc as u8];
                out.extend_from_slice(&(-6i32).to_le_bytes());
                Ok(out)
            }
            _ => Err(format!("unsupported {mn} operands")),
        };
    }
    match (mn, ops) {
        ("nop", []) => Ok(vec![0x90]),
        ("nop", [COp::Mem(m)]) => {
            let size = mem_size(m, None)?;
            let mut e = Enc::default();
            width_prefixes(&mut e, size);
            if size == 1 {
                return Err("byte nop form does not exist".into());
            }
            e.opcode = vec![0x0f, 0x1f];
            e.set_reg_digit(0);
            e.set_rm_mem(m)?;
            e.emit()
        }
        ("ret", []) => Ok(vec![0xc3]),
        ("ret", [COp::Imm { value, .. }]) => {
            let mut out = vec![0xc2];
            out.extend_from_slice(&(*value as u16).to_le_bytes());
            Ok(out)
        }
        ("leave", []) => Ok(vec![0xc9]),
        ("db", [COp::Imm { .. }]) => Ok(vec![DB_POOL[rng.gen_range(0..DB_POOL.len())]]),
        ("push", [COp::Reg(r)]) if r.size == 8 || r.size == 2 => {
            let e = Enc {
                size66: r.size == 2,
                rex_b: r.index >= 8,
                opcode: vec![0x50 | (r.index & 7)],
                ..Enc::default()
            };
            e.emit()
        }
        ("push", [COp::Imm { value, .. }]) => {
            if let Ok(v) = i8::try_from(*value) {
                Ok(vec![0x6a, v as u8])
            } else {
                let mut out = vec![0x68];
                out.extend_from_slice(&(*value as i32).to_le_bytes());
                Ok(out)
            }
        }
        ("push", [COp::Mem(m)]) => {
            if mem_size(m, None)? != 8 {
                return Err("push memory is 64-bit".into());
            }
            let mut e = Enc {
                opcode: vec![0xff],
                ..Enc::default()
            };
            e.set_reg_digit(6);
            e.set_rm_mem(m)?;
            e.emit()
        }
        ("pop", [COp::Reg(r)]) if r.size == 8 || r.size == 2 => {
            let e = Enc {
                size66: r.size == 2,
                rex_b: r.index >= 8,
                opcode: vec![0x58 | (r.index & 7)],
                ..Enc::default()
            };
            e.emit()
        }
        ("pop", [COp::Mem(m)]) => {
            if mem_size(m, None)? != 8 {
                return Err("pop memory is 64-bit".into());
            }
            let mut e = Enc {
                opcode: vec![0x8f],
                ..Enc::default()
            };
            e.set_reg_digit(0);
            e.set_rm_mem(m)?;
            e.emit()
        }
        ("mov", [COp::Reg(dst), COp::Reg(src)]) => {
            encode_rm_reg(0x88, 0x89, &COp::Reg(*dst), *src)
        }
        ("mov", [COp::Reg(dst), COp::Imm { value, .. }]) => match dst.size {
            1 => {
                let mut e = Enc::default();
                e.note_byte_reg(*dst);
                if dst.index >= 8 {
                    e.rex_b = true;
                }
                e.opcode = vec![0xb0 | (dst.index & 7)];
                e.imm = imm_bytes(*value, 1);
                e.emit()
            }
            2 | 4 => {
                let mut e = Enc::default();
                width_prefixes(&mut e, dst.size);
                if dst.index >= 8 {
                    e.rex_b = true;
                }
                e.opcode = vec![0xb8 | (dst.index & 7)];
                e.imm = imm_bytes(*value, dst.size);
                e.emit()
            }
            8 => encode_rm_imm(0xc6, 0xc7, 0, &COp::Reg(*dst), 8, *value, 4),
            _ => Err("bad register width".into()),
        },
        ("mov", [COp::Reg(dst), COp::Mem(_)]) => {
            encode_rm_reg(0x8a, 0x8b, &ops[1], *dst).map(swap_direction_noop)
        }
        ("mov", [COp::Mem(_), COp::Reg(src)]) => encode_rm_reg(0x88, 0x89, &ops[0], *src),
        ("mov", [COp::Mem(m), COp::Imm { value, .. }]) => {
            let size = mem_size(m, None)?;
            let w = if size == 2 { 2 } else { 4.min(size as i32) as u8 };
            encode_rm_imm(0xc6, 0xc7, 0, &ops[0], size, *value, if size == 1 { 1 } else { w })
        }
        ("lea", [COp::Reg(dst), COp::Mem(m)]) => {
            if m.size_kw.is_some() {
                return Err("lea takes no width keyword".into());
            }
            let mut e = Enc::default();
            width_prefixes(&mut e, dst.size);
            e.opcode = vec![0x8d];
            e.set_reg_field(*dst);
            e.set_rm_mem(m)?;
            e.emit()
        }
        ("test", [COp::Reg(dst), COp::Reg(src)]) => {
            encode_rm_reg(0x84, 0x85, &COp::Reg(*dst), *src)
        }
        ("test", [COp::Mem(_), COp::Reg(src)]) => encode_rm_reg(0x84, 0x85, &ops[0], *src),
        ("test", [rm @ (COp::Reg(_) | COp::Mem(_)), COp::Imm { value, .. }]) => {
            let size = match rm {
                COp::Reg(r) => r.size,
                COp::Mem(m) => mem_size(m, None)?,
                _ => unreachable!(),
            };
            let w = match size {
                1 => 1,
                2 => 2,
                _ => 4,
            };
            encode_rm_imm(0xf6, 0xf7, 0, rm, size, *value, w)
        }
        ("imul", [COp::Reg(dst), rm @ (COp::Reg(_) | COp::Mem(_))]) => {
            let mut e = Enc::default();
            width_prefixes(&mut e, dst.size);
            e.opcode = vec![0x0f, 0xaf];
            e.set_reg_field(*dst);
            match rm {
                COp::Reg(r) => e.set_rm_reg(*r),
                COp::Mem(m) => e.set_rm_mem(m)?,
                _ => unreachable!(),
            }
            e.emit()
        }
        (
            "imul",
            [COp::Reg(dst), rm @ (COp::Reg(_) | COp::Mem(_)), COp::Imm { value, size_kw }],
        ) => {
            let kw = size_kw.ok_or("imul immediate needs a width keyword")?;
            let mut e = Enc::default();
            width_prefixes(&mut e, dst.size);
            e.opcode = vec![match kw {
                1 => 0x6b,
                2 | 4 => 0x69,
                _ => return Err("imul immediate width".into()),
            }];
            if kw == 2 && dst.size != 2 || kw == 4 && dst.size < 4 {
                return Err("imul width keyword mismatch".into());
            }
            e.set_reg_field(*dst);
            match rm {
                COp::Reg(r) => e.set_rm_reg(*r),
                COp::Mem(m) => e.set_rm_mem(m)?,
                _ => unreachable!(),
            }
            e.imm = imm_bytes(*value, kw);
            e.emit()
        }
        ("imul", [rm @ (COp::Reg(_) | COp::Mem(_))]) => {
            let size = match rm {
                COp::Reg(r) => r.size,
                COp::Mem(m) => mem_size(m, None)?,
                _ => unreachable!(),
            };
            let mut e = Enc::default();
            width_prefixes(&mut e, size);
            e.opcode = vec![if size == 1 { 0xf6 } else { 0xf7 }];
            e.set_reg_digit(5);
            match rm {
                COp::Reg(r) => e.set_rm_reg(*r),
                COp::Mem(m) => e.set_rm_mem(m)?,
                _ => unreachable!(),
            }
            e.emit()
        }
        ("inc" | "dec", [rm @ (COp::Reg(_) | COp::Mem(_))]) => {
            let size = match rm {
                COp::Reg(r) => r.size,
                COp::Mem(m) => mem_size(m, None)?,
                _ => unreachable!(),
            };
            let mut e = Enc::default();
            width_prefixes(&mut e, size);
            e.opcode = vec![if size == 1 { 0xfe } else { 0xff }];
            e.set_reg_digit(if mn == "inc" { 0 } else { 1 });
            match rm {
                COp::Reg(r) => e.set_rm_reg(*r),
                COp::Mem(m) => e.set_rm_mem(m)?,
                _ => unreachable!(),
            }
            e.emit()
        }
        ("call", [COp::RelSelf]) => {
            let mut out = vec![0xe8];
            out.extend_from_slice(&(-5i32).to_le_bytes());
            Ok(out)
        }
        ("jmp", [COp::RelSelf]) => {
            let mut out = vec![0xe9];
            out.extend_from_slice(&(-5i32).to_le_bytes());
            Ok(out)
        }
        ("call" | "jmp", [rm @ (COp::Reg(_) | COp::Mem(_))]) => {
            let digit = if mn == "call" { 2 } else { 4 };
            let size = match rm {
                COp::Reg(r) => r.size,
                COp::Mem(m) => mem_size(m, None)?,
                _ => unreachable!(),
            };
            if size != 8 {
                return Err(format!("indirect {mn} is 64-bit"));
            }
            let mut e = Enc {
                opcode: vec![0xff],
                ..Enc::default()
            };
            e.set_reg_digit(digit);
            match rm {
                COp::Reg(r) => e.set_rm_reg(Reg::new(r.index, 8)),
                COp::Mem(m) => e.set_rm_mem(m)?,
                _ => unreachable!(),
            }
            e.emit()
        }
        _ => {
            if let Some(spec) = alu_spec(mn) {
                return match ops {
                    [COp::Reg(dst), COp::Reg(src)] => {
                        encode_rm_reg(spec.base, spec.base + 1, &COp::Reg(*dst), *src)
                    }
                    [COp::Reg(dst), COp::Imm { value, .. }] => encode_rm_imm(
                        0x80,
                        0x83,
                        spec.digit,
                        &COp::Reg(*dst),
                        dst.size,
                        *value,
                        1,
                    ),
                    [COp::Reg(dst), COp::Mem(_)] => {
                        encode_rm_reg(spec.base + 2, spec.base + 3, &ops[1], *dst)
                    }
                    [COp::Mem(_), COp::Reg(src)] => {
                        encode_rm_reg(spec.base, spec.base + 1, &ops[0], *src)
                    }
                    [COp::Mem(m), COp::Imm { value, .. }] => {
                        let size = mem_size(m, None)?;
                        encode_rm_imm(0x80, 0x83, spec.digit, &ops[0], size, *value, 1)
                    }
                    _ => Err(format!("unsupported {mn} operands")),
                };
            }
            let _ = vaddr;
            Err(format!("unsupported mnemonic {mn:?}"))
        }
    }
}

// encode_rm_reg builds (rm, reg) in ModRM terms regardless of display
// direction; the identity below only exists to keep the mov load arm
// shaped like its store sibling.
fn swap_direction_noop(bytes: Vec<u8>) -> Vec<u8> {
    bytes
}

/// Patch the RIP displacement of a freshly encoded instruction so its target
/// lands in the requested hole. `bytes` must hold exactly one instruction
/// with a rip-relative memory operand.
fn aim_rip(bytes: &mut [u8], vaddr: u64, imm_len: usize, positive: bool, env: &AsmEnv) {
    let len = bytes.len() as i64;
    let next = vaddr as i64 + len;
    let target = if positive {
        env.high_hole.max((next + 0x10) as u64) as i64
    } else {
        env.low_hole.min((next - 0x7f).max(0x10) as u64) as i64
    };
    let disp = (target - next) as i32;
    let at = bytes.len() - 4 - imm_len;
    bytes[at..at + 4].copy_from_slice(&disp.to_le_bytes());
}

/// Assemble one normalized instruction text for placement at `vaddr`.
/// The result is decoded back and re-normalized; any mismatch is an error,
/// so a successful return is a proof of round-trip fidelity.
pub(crate) fn assemble_text(
    text: &str,
    vaddr: u64,
    env: &AsmEnv,
    rng: &mut ChaCha8Rng,
) -> AsmResult<Vec<u8>> {
    let (mn, pops) = parse_insn(text)?;
    let cops = materialize(&mn, &pops, env, rng)?;
    let mut bytes = encode(&mn, &cops, vaddr, rng)?;
    // RIP displacements, unconstrained by the grammar, get aimed at the
    // unmapped holes after the final length is known.
    if env.annotation_safe {
        if let Some(COp::Mem(m)) = cops.iter().find(|o| matches!(o, COp::Mem(m) if m.rip)) {
            let imm_len = cops
                .iter()
                .find_map(|o| match o {
                    COp::Imm { size_kw, .. } => Some(size_kw.unwrap_or(0) as usize),
                    _ => None,
                })
                .unwrap_or(0);
            aim_rip(&mut bytes, vaddr, imm_len, m.rip_positive, env);
        }
    }
    let insn = decode_one(&bytes, 0, vaddr);
    if insn.length as usize != bytes.len() {
        return Err(format!(
            "encoding of {text:?} decodes to {} of {} bytes",
            insn.length,
            bytes.len()
        ));
    }
    let got = normalize_tokens(&insn.text());
    if got != text {
        return Err(format!(
            "round trip mismatch: {text:?} assembled to {bytes:02x?} which reads back as {got:?}"
        ));
    }
    Ok(bytes)
}

/// Assemble a whole feature string: a unigram gives one instruction, a
/// bigram ("a; b") two that must sit adjacent.
pub(crate) fn assemble_feature(
    text: &str,
    vaddr: u64,
    env: &AsmEnv,
    rng: &mut ChaCha8Rng,
) -> AsmResult<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    let mut at = vaddr;
    for part in text.split("; ") {
        let bytes = assemble_text(part, at, env, rng)?;
        at += bytes.len() as u64;
        out.push(bytes);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fixed encodings for trampolines.

pub(crate) fn jmp_rel32(from: u64, to: u64) -> AsmResult<Vec<u8>> {
    let disp: i32 = (to as i64 - (from as i64 + 5))
        .try_into()
        .map_err(|_| format!("jmp from {from:#x} cannot reach {to:#x}"))?;
    let mut out = vec![0xe9];
    out.extend_from_slice(&disp.to_le_bytes());
    Ok(out)
}

pub(crate) fn call_rel32(from: u64, to: u64) -> AsmResult<Vec<u8>> {
    let disp: i32 = (to as i64 - (from as i64 + 5))
        .try_into()
        .map_err(|_| format!("call from {from:#x} cannot reach {to:#x}"))?;
    let mut out = vec![0xe8];
    out.extend_from_slice(&disp.to_le_bytes());
    Ok(out)
}

pub(crate) const CALL_R11: [u8; 3] = [0x41, 0xff, 0xd3];
pub(crate) const PUSH_R11: [u8; 2] = [0x41, 0x53];
pub(crate) const POP_R11: [u8; 2] = [0x41, 0x5b];
pub(crate) const RET: u8 = 0xc3;
pub(crate) const NOP: u8 = 0x90;

/// lea dst, [rip+disp] targeting `target` when placed at `vaddr`. dst must
/// be 4 or 8 bytes wide.
pub(crate) fn lea_rip(dst: Reg, vaddr: u64, target: u64) -> AsmResult<Vec<u8>> {
    let needs_rex = dst.size == 8 || dst.index >= 8;
    let len = 6 + needs_rex as i64;
    let disp: i32 = (target as i64 - (vaddr as i64 + len))
        .try_into()
        .map_err(|_| format!("lea at {vaddr:#x} cannot reach {target:#x}"))?;
    let mut out = Vec::with_capacity(len as usize);
    if needs_rex {
        out.push(0x40 | ((dst.size == 8) as u8) << 3 | ((dst.index >= 8) as u8) << 2);
    }
    out.push(0x8d);
    out.push(0x05 | ((dst.index & 7) << 3));
    out.extend_from_slice(&disp.to_le_bytes());
    Ok(out)
}

/// add dst, k with the shortest immediate form.
pub(crate) fn add_reg_imm(dst: Reg, k: i64) -> Vec<u8> {
    let mut out = Vec::new();
    let rex = ((dst.size == 8) as u8) << 3 | (dst.index >= 8) as u8;
    if rex != 0 {
        out.push(0x40 | rex);
    }
    if let Ok(k8) = i8::try_from(k) {
        out.push(0x83);
        out.push(0xc0 | (dst.index & 7));
        out.push(k8 as u8);
    } else {
        out.push(0x81);
        out.push(0xc0 | (dst.index & 7));
        out.extend_from_slice(&(k as i32).to_le_bytes());
    }
    out
}

/// mov dst, [base] where base is a 64-bit register; dst width picks the
/// opcode. Handles the rsp/r12 SIB and rbp/r13 disp8 encoding quirks.
pub(crate) fn mov_load(dst: Reg, base: Reg) -> Vec<u8> {
    let mut out = Vec::new();
    if dst.size == 2 {
        out.push(0x66);
    }
    let rex = ((dst.size == 8) as u8) << 3 | ((dst.index >= 8) as u8) << 2 | (base.index >= 8) as u8;
    if rex != 0 || (dst.size == 1 && (4..8).contains(&dst.index) && !dst.high) {
        out.push(0x40 | rex);
    }
    out.push(if dst.size == 1 { 0x8a } else { 0x8b });
    let b7 = base.index & 7;
    if b7 == 4 {
        out.push((dst.index & 7) << 3 | 0x04);
        out.push(0x24);
    } else if b7 == 5 {
        out.push(0x40 | (dst.index & 7) << 3 | b7);
        out.push(0x00);
    } else {
        out.push((dst.index & 7) << 3 | b7);
    }
    out
}

/// Re-encode a decoded instruction's bytes for execution at `new_vaddr`:
/// rip displacements and 4-byte branch fields are adjusted so the original
/// targets stay fixed. Returns None for bytes that cannot move (db, 1-byte
/// relative branches, out-of-reach targets).
pub(crate) fn relocate(bytes: &[u8], insn: &Instruction, new_vaddr: u64) -> Option<Vec<u8>> {
    if insn.mnemonic == "db" {
        return None;
    }
    let mut out = bytes.to_vec();
    let len = bytes.len();
    let imm_len = insn
        .operands
        .iter()
        .find_map(|o| match o {
            Operand::Imm { enc_width, .. } => Some(*enc_width as usize),
            _ => None,
        })
        .unwrap_or(0);
    for op in &insn.operands {
        match op {
            Operand::Rel { enc_width: 1, .. } => return None,
            Operand::Rel { target, .. } => {
                let disp: i32 = (*target as i64 - (new_vaddr as i64 + len as i64))
                    .try_into()
                    .ok()?;
                out[len - 4..].copy_from_slice(&disp.to_le_bytes());
            }
            Operand::Mem(m) if m.rip_relative => {
                let target = insn
                    .vaddr
                    .wrapping_add(len as u64)
                    .wrapping_add(m.disp as u64);
                let disp: i32 = (target as i64 - (new_vaddr as i64 + len as i64))
                    .try_into()
                    .ok()?;
                let at = len - 4 - imm_len;
                out[at..at + 4].copy_from_slice(&disp.to_le_bytes());
            }
            _ => {}
        }
    }
    Some(out)
}
