//! Differential check of the decoder against a frozen objdump-derived
//! fixture.
//!
//! `fixtures/decoder_oracle.tsv` holds byte sequences with the text and
//! length binutils assigns them, rewritten into this crate's operand
//! grammar at generation time. The normal test replays the fixture and
//! requires exact agreement; `regen_fixture` (ignored by default) rebuilds
//! it by disassembling curated sequences plus instructions harvested from
//! system binaries, so the expectations never come from the decoder under
//! test.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::Command;

use ghostwriter::decoder::decode_one;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/decoder_oracle.tsv")
}

#[test]
fn decoder_matches_objdump_fixture() {
    let data = std::fs::read_to_string(fixture_path()).expect("fixture present");
    let mut rows = 0usize;
    let mut mnemonics = BTreeSet::new();
    for line in data.lines() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split('\t');
        let hex = f.next().unwrap();
        let vaddr = u64::from_str_radix(f.next().unwrap().trim_start_matches("0x"), 16).unwrap();
        let length: u8 = f.next().unwrap().parse().unwrap();
        let expected = f.next().unwrap();
        let bytes = hex_to_bytes(hex);
        let insn = decode_one(&bytes, 0, vaddr);
        assert_eq!(
            insn.text(),
            expected,
            "bytes {hex} at {vaddr:#x}: decoded {:?}, fixture says {:?}",
            insn.text(),
            expected
        );
        assert_eq!(insn.length, length, "bytes {hex}: length mismatch");
        mnemonics.insert(insn.mnemonic);
        rows += 1;
    }
    assert!(rows >= 200, "fixture shrank to {rows} rows");
    assert!(
        mnemonics.len() >= 18,
        "fixture covers only {} mnemonics: {mnemonics:?}",
        mnemonics.len()
    );
}

fn hex_to_bytes(hex: &str) -> Vec<u8> {
    (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).unwrap())
        .collect()
}

fn bytes_to_hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Curated encodings that must make it into the fixture. Each is a single
/// complete instruction; regeneration fails loudly if objdump's view of one
/// cannot be converted or the decoder disagrees on length.
const CURATED: &[&str] = &[
    // mov r/m,r and r,r/m across widths and REX
    "89d8",
    "4889d8",
    "6689d8",
    "88d8",
    "4588e7",
    "8b45fc",
    "488b45f8",
    "668b45fa",
    "8a45ff",
    "458a4510",
    "498b849020304050",
    // mov imm forms, including sign extension and movabs
    "b82a000000",
    "48c7c02a000000",
    "48c7c0ffffffff",
    "66b83412",
    "b001",
    "b4ff",
    "41b7fe",
    "48b88877665544332211",
    "49bfffffffffffffffff",
    "c745fc01000000",
    "66c745fa3412",
    "c6040300",
    // lea
    "488d45f0",
    "488d0536fdffff",
    "488d05ca0d0000",
    "8d0c9d00000000",
    "4c8d24c5f8ffffff",
    "488d849000010000",
    // push/pop
    "55",
    "4155",
    "5d",
    "415d",
    "6a01",
    "6aff",
    "6800010000",
    "68ffffffff",
    "ff742408",
    "8f45f8",
    "66 55",
    // add/sub/and/or/xor/cmp/test spread over encodings
    "01d8",
    "4801d8",
    "0345fc",
    "480345f8",
    "83c001",
    "4883ec18",
    "4883c4f8",
    "0501000000",
    "4825ff0f0000",
    "29d8",
    "2b45fc",
    "83e801",
    "2d10000000",
    "21d8",
    "4421f8",
    "83e00f",
    "25ffff0000",
    "09d8",
    "0b45fc",
    "83c880",
    "0d00010000",
    "31d8",
    "4831ff",
    "3345fc",
    "83f101",
    "3512345678",
    "39d8",
    "4839c6",
    "3b45fc",
    "83f80a",
    "3dff000000",
    "3c0a",
    "80f90a",
    "817dfc10270000",
    "837df805",
    "48837dc800",
    "85c0",
    "4885ff",
    "8445ff",
    "a801",
    "a9000100c0",
    "f6c301",
    "f7c100010000",
    "48f7c7ffff0000",
    // imul: two- and three-operand forms
    "0fafc3",
    "480fafc7",
    "0faf45fc",
    "6bc307",
    "6bc3ff",
    "69c300010000",
    "6669c33412",
    "486bff10",
    "4869c9a0860100",
    "6b45f805",
    // inc/dec
    "ffc0",
    "48ffc7",
    "fec8",
    "48ff4d10",
    "ff45fc",
    "66ffc0",
    // nop family
    "90",
    "0f1f00",
    "0f1f4000",
    "0f1f440000",
    "660f1f440000",
    "0f1f8000000000",
    "0f1f840000000000",
    "660f1f840000000000",
    // call/jmp/ret/leave
    "e800010000",
    "e8fbfeffff",
    "ffd0",
    "41ffd5",
    "ff5508",
    "ff142500100000",
    "ff15c2092000",
    "c3",
    "c20800",
    "c9",
    "eb05",
    "ebfe",
    "e912000000",
    "e9e5feffff",
    "ffe0",
    "ff6020",
    "ff25c2092000",
    // jcc, short and near
    "7005",
    "7105",
    "7205",
    "7305",
    "7405",
    "7505",
    "7605",
    "7705",
    "7805",
    "7905",
    "7a05",
    "7b05",
    "7c05",
    "7d05",
    "7e05",
    "7f05",
    "0f8030020000",
    "0f8130020000",
    "0f8230020000",
    "0f8330020000",
    "0f8430020000",
    "0f8530020000",
    "0f8630020000",
    "0f8730020000",
    "0f8830020000",
    "0f8930020000",
    "0f8a30020000",
    "0f8b30020000",
    "0f8c30020000",
    "0f8d30020000",
    "0f8e30020000",
    "0f8f30020000",
    // addressing-mode matrix: SIB scales, rbp/r13 specials, rsp base,
    // absolute, rip, segment overrides
    "488b0424",
    "488b442408",
    "488b8424a0000000",
    "488b4500",
    "498b4500",
    "8b04cd00000000",
    "8b048d00000000",
    "8b04dd10000000",
    "448b3c85fcffffff",
    "8b0425381060 00",
    "648b042510000000",
    "65488b042528000000",
    "6448890425280000 00",
    "488b0c05e8030000",
    "488b1425e8030000",
    "428b449005",
    "468b0cb8",
    "438b04a1",
    "428b04fd00000000",
    "8b4300",
    "8b430c",
    "8b8340e20100",
    "458b6424fc",
    "4d8b6c2440",
    "8a85e0feffff",
    "66837b0a00",
];

/// Rebuild the fixture from objdump output. Run with
/// `cargo test -p ghostwriter --test decoder_oracle regen_fixture -- --ignored`.
#[test]
#[ignore]
fn regen_fixture() {
    let mut rows: Vec<(Vec<u8>, u64, String)> = Vec::new();

    // Curated blob first: every entry is mandatory.
    let curated: Vec<Vec<u8>> = CURATED
        .iter()
        .map(|h| hex_to_bytes(&h.replace(' ', "")))
        .collect();
    let blob: Vec<u8> = curated.iter().flatten().copied().collect();
    let tmp = std::env::temp_dir().join("gw_decoder_oracle_blob.bin");
    std::fs::write(&tmp, &blob).unwrap();
    let out = Command::new("objdump")
        .args(["-D", "-b", "binary", "-m", "i386:x86-64", "-M", "intel"])
        .arg(&tmp)
        .output()
        .expect("objdump available");
    assert!(out.status.success());
    let listing = parse_objdump(&String::from_utf8_lossy(&out.stdout));
    let mut at = 0usize;
    for entry in &curated {
        let line = listing
            .iter()
            .find(|l| l.vaddr == at as u64)
            .unwrap_or_else(|| panic!("objdump lost sync before {}", bytes_to_hex(entry)));
        assert_eq!(
            line.bytes,
            *entry,
            "curated entry {} is not a single instruction",
            bytes_to_hex(entry)
        );
        let text = convert(&line.text, &line.bytes, line.vaddr).unwrap_or_else(|| {
            panic!("cannot convert {:?} for {}", line.text, bytes_to_hex(entry))
        });
        let insn = decode_one(entry, 0, line.vaddr);
        assert_ne!(insn.mnemonic, "db", "decoder rejects curated {}", bytes_to_hex(entry));
        assert_eq!(insn.length as usize, entry.len(), "length drift on {}", bytes_to_hex(entry));
        rows.push((entry.clone(), line.vaddr, text));
        at += entry.len();
    }

    // Harvested rows broaden operand variety; capped per mnemonic so one
    // binary's idiom does not dominate.
    let mut per_mnemonic: std::collections::BTreeMap<String, usize> = Default::default();
    let mut seen_shapes: BTreeSet<String> = BTreeSet::new();
    let mut gaps = 0usize;
    for bin in ["/usr/bin/ls", "/usr/bin/gcc", "/usr/bin/dd"] {
        let out = Command::new("objdump")
            .args(["-d", "-M", "intel"])
            .arg(bin)
            .output()
            .expect("objdump available");
        if !out.status.success() {
            continue;
        }
        for line in parse_objdump(&String::from_utf8_lossy(&out.stdout)) {
            let Some(text) = convert(&line.text, &line.bytes, line.vaddr) else {
                continue;
            };
            let mnemonic = text.split(' ').next().unwrap().to_string();
            let shape: String = text
                .chars()
                .map(|c| if c.is_ascii_hexdigit() { '#' } else { c })
                .collect();
            if !seen_shapes.insert(shape) {
                continue;
            }
            let n = per_mnemonic.entry(mnemonic).or_insert(0);
            if *n >= 10 {
                continue;
            }
            let insn = decode_one(&line.bytes, 0, line.vaddr);
            if insn.mnemonic == "db" || insn.length as usize != line.bytes.len() {
                gaps += 1;
                continue;
            }
            *n += 1;
            rows.push((line.bytes, line.vaddr, text));
        }
    }

    let mut tsv = String::from("# bytes\tvaddr\tlength\ttext (objdump-derived)\n");
    for (bytes, vaddr, text) in &rows {
        let _ = writeln!(tsv, "{}\t{vaddr:#x}\t{}\t{text}", bytes_to_hex(bytes), bytes.len());
    }
    std::fs::create_dir_all(fixture_path().parent().unwrap()).unwrap();
    std::fs::write(fixture_path(), tsv).unwrap();
    println!(
        "wrote {} rows ({} curated), skipped {} convertible-but-undecoded",
        rows.len(),
        curated.len(),
        gaps
    );
}

struct ObjdumpLine {
    vaddr: u64,
    bytes: Vec<u8>,
    text: String,
}

/// Parse `objdump -d` output into complete instructions, folding the
/// continuation lines long encodings spill onto.
fn parse_objdump(out: &str) -> Vec<ObjdumpLine> {
    let mut lines: Vec<ObjdumpLine> = Vec::new();
    for raw in out.lines() {
        let Some((addr, rest)) = raw.trim_start().split_once(':') else {
            continue;
        };
        let Ok(vaddr) = u64::from_str_radix(addr.trim(), 16) else {
            continue;
        };
        let rest = rest.strip_prefix('\t').unwrap_or(rest);
        let mut parts = rest.splitn(2, '\t');
        let Some(hex_field) = parts.next() else { continue };
        let text = parts.next().unwrap_or("").trim().to_string();
        let mut bytes = Vec::new();
        let mut clean = true;
        for tok in hex_field.split_whitespace() {
            match u8::from_str_radix(tok, 16) {
                Ok(b) if tok.len() == 2 => bytes.push(b),
                _ => {
                    clean = false;
                    break;
                }
            }
        }
        if !clean || bytes.is_empty() {
            continue;
        }
        if text.is_empty() {
            if let Some(last) = lines.last_mut() {
                last.bytes.extend(bytes);
            }
        } else {
            lines.push(ObjdumpLine { vaddr, bytes, text });
        }
    }
    lines
}

const BRANCHES: &[&str] = &[
    "call", "jmp", "jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja", "js", "jns", "jp", "jnp",
    "jl", "jge", "jle", "jg",
];

const REGS: &[&str] = &[
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12",
    "r13", "r14", "r15", "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d",
    "r10d", "r11d", "r12d", "r13d", "r14d", "r15d", "ax", "cx", "dx", "bx", "sp", "bp", "si",
    "di", "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w", "al", "cl", "dl", "bl",
    "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b",
    "ah", "ch", "dh", "bh",
];

/// Rewrite one objdump Intel-syntax line into the decoder's grammar.
/// Returns None for anything outside the supported subset or containing
/// constructs the grammar never produces.
fn convert(text: &str, bytes: &[u8], vaddr: u64) -> Option<String> {
    let text = text.split('#').next().unwrap();
    let text = text.split('<').next().unwrap().trim();
    let (mut mnemonic, rest) = match text.split_once(char::is_whitespace) {
        Some((m, r)) => (m, r.trim()),
        None => (text, ""),
    };
    if mnemonic == "movabs" {
        mnemonic = "mov";
    }
    const SUBSET: &[&str] = &[
        "mov", "lea", "push", "pop", "add", "sub", "and", "or", "xor", "cmp", "test", "imul",
        "inc", "dec", "nop", "call", "ret", "jmp", "leave", "jo", "jno", "jb", "jae", "je",
        "jne", "jbe", "ja", "js", "jns", "jp", "jnp", "jl", "jge", "jle", "jg",
    ];
    if !SUBSET.contains(&mnemonic) {
        return None;
    }
    if rest.is_empty() {
        return Some(mnemonic.to_string());
    }
    let raw_ops: Vec<&str> = rest.split(',').map(str::trim).collect();
    let has_reg = raw_ops.iter().any(|o| REGS.contains(o));
    let is_branch = BRANCHES.contains(&mnemonic);
    let mut ops: Vec<String> = Vec::new();
    for (i, op) in raw_ops.iter().enumerate() {
        if REGS.contains(op) {
            ops.push(op.to_string());
        } else if let Some(m) = convert_mem(op, has_reg)? {
            ops.push(m);
        } else if is_branch && raw_ops.len() == 1 {
            let v = u64::from_str_radix(op.trim_start_matches("0x"), 16).ok()?;
            ops.push(format!("{v:#x}"));
        } else if let Some(hex) = op.strip_prefix("0x") {
            let v = u64::from_str_radix(hex, 16).ok()?;
            if mnemonic == "imul" && i == raw_ops.len() - 1 {
                ops.push(format!("{} {v:#x}", imul_imm_keyword(bytes)?));
            } else {
                ops.push(format!("{v:#x}"));
            }
        } else {
            return None;
        }
    }
    let _ = vaddr;
    Some(format!("{mnemonic} {}", ops.join(",")))
}

/// Memory operand rewrite: lowercase the size keyword and keep it only when
/// no register operand pins the width, move the segment inside the
/// brackets, drop `*1` scales, fold objdump's sign-extended rip
/// displacements back to signed form, and bracket unadorned absolutes.
fn convert_mem(op: &str, has_reg: bool) -> Option<Option<String>> {
    let (kw, rest) = if let Some((kw, r)) = op.split_once(" PTR ") {
        let kw = match kw {
            "BYTE" => "byte",
            "WORD" => "word",
            "DWORD" => "dword",
            "QWORD" => "qword",
            _ => return None,
        };
        (Some(kw), r.trim())
    } else {
        (None, op)
    };
    let (seg, rest) = match rest.split_once(':') {
        Some((s, r)) if ["cs", "ss", "ds", "es", "fs", "gs"].contains(&s) => (Some(s), r),
        _ => (None, rest),
    };
    let bracketed = rest.starts_with('[');
    let inner = if let Some(stripped) = rest.strip_prefix('[') {
        stripped.strip_suffix(']')?.to_string()
    } else if let Some(hex) = rest.strip_prefix("0x") {
        if kw.is_none() && seg.is_none() {
            return Some(None);
        }
        let v = u64::from_str_radix(hex, 16).ok()?;
        format!("{:#x}", v & 0xffff_ffff)
    } else {
        if kw.is_none() && seg.is_none() {
            return Some(None);
        }
        return None;
    };
    if inner.contains("riz") || inner.contains("eiz") {
        return None;
    }
    let mut inner = inner.replace("*1+", "+").replace("*1-", "-");
    if let Some(s) = inner.strip_suffix("*1") {
        inner = s.to_string();
    }
    if let Some(hex) = inner.strip_prefix("rip+0x") {
        let v = u64::from_str_radix(hex, 16).ok()?;
        let d = v as i64;
        inner = if d < 0 {
            format!("rip-{:#x}", d.unsigned_abs())
        } else {
            format!("rip+{d:#x}")
        };
    }
    // Unbracketed ds is objdump's spelling of an absolute with no prefix
    // byte at all, so it folds away; a bracketed ds reflects a real 3e.
    let seg_part = match seg {
        Some("ds") if !bracketed => String::new(),
        None => String::new(),
        Some(s) => format!("{s}:"),
    };
    let kw_part = match kw {
        Some(kw) if !has_reg => format!("{kw} "),
        _ => String::new(),
    };
    Some(Some(format!("{kw_part}[{seg_part}{inner}]")))
}

/// Immediate width keyword for imul, read off the opcode: 6B carries imm8,
/// 69 carries imm16 under an operand-size prefix and imm32 otherwise.
fn imul_imm_keyword(bytes: &[u8]) -> Option<&'static str> {
    let mut opsize16 = false;
    for &b in bytes {
        match b {
            0x66 => opsize16 = true,
            0x67 | 0xf2 | 0xf3 | 0x2e | 0x36 | 0x3e | 0x26 | 0x64 | 0x65 => {}
            0x40..=0x4f => {}
            0x6b => return Some("byte"),
            0x69 => return Some(if opsize16 { "word" } else { "dword" }),
            _ => return None,
        }
    }
    None
}
