//! The two disassembly front-ends.
//!
//! `linear_sweep` decodes every byte of the file image consecutively from
//! offset zero, headers and all, the way a naive linear disassembler sees a
//! binary. `code_sweep` starts from function symbols and the entry point,
//! follows straight-line fall-through inside executable sections, and
//! attaches annotations for operands that resolve to strings, named symbols
//! or call targets.

use super::{decode_one, Annotation, AnnotationKind, Instruction, Operand};
use crate::elf::{ElfImage, Symbol, SymbolTableKind, SymbolType, R_X86_64_GLOB_DAT, R_X86_64_JUMP_SLOT};
use std::collections::{BTreeMap, HashSet};

/// Iterator over a whole file image, one instruction per step. Instruction
/// addresses are file offsets, matching a disassembler that knows nothing
/// about load addresses.
pub struct LinearSweep<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Iterator for LinearSweep<'a> {
    type Item = Instruction;

    fn next(&mut self) -> Option<Instruction> {
        if self.pos >= self.bytes.len() {
            return None;
        }
        let mut insn = decode_one(self.bytes, self.pos, self.pos as u64);
        // A multi-byte decode hanging off the end of the file would claim
        // bytes that do not exist.
        if self.pos + insn.length as usize > self.bytes.len() {
            insn = Instruction {
                vaddr: self.pos as u64,
                file_offset: self.pos as u64,
                length: 1,
                mnemonic: "db",
                operands: vec![Operand::Imm {
                    value: self.bytes[self.pos] as i64,
                    op_size: 1,
                    enc_width: 1,
                }],
                annotations: Vec::new(),
            };
        }
        self.pos += insn.length as usize;
        Some(insn)
    }
}

pub fn linear_sweep(bytes: &[u8]) -> LinearSweep<'_> {
    LinearSweep { bytes, pos: 0 }
}

/// Pre-resolved lookup context for annotations.
pub(crate) struct AnnotationContext {
    /// Defined, named symbols by exact value.
    symbols: BTreeMap<u64, (String, SymbolType)>,
    /// Relocation slot vaddr -> imported name, for PLT-style resolution.
    slots: BTreeMap<u64, String>,
}

impl AnnotationContext {
    pub(crate) fn build(image: &ElfImage) -> Self {
        let mut symbols = BTreeMap::new();
        // Symtab entries take precedence over dynsym duplicates, so insert
        // dynsym first and let symtab overwrite. Versioned references keep
        // their bare name ("stderr@GLIBC_2.2.5" resolves as "stderr").
        for kind in [SymbolTableKind::Dynsym, SymbolTableKind::Symtab] {
            for sym in image.symbols(kind).unwrap_or_default() {
                if sym.is_defined()
                    && !sym.name.is_empty()
                    && matches!(sym.sym_type, SymbolType::Func | SymbolType::Object)
                {
                    let name = sym.name.split('@').next().unwrap_or(&sym.name).to_string();
                    symbols.insert(sym.value, (name, sym.sym_type));
                }
            }
        }
        let dynsyms = image.symbols(SymbolTableKind::Dynsym).unwrap_or_default();
        let mut slots = BTreeMap::new();
        for rela in image.relocations() {
            if rela.r_type == R_X86_64_JUMP_SLOT || rela.r_type == R_X86_64_GLOB_DAT {
                if let Some(sym) = dynsyms.get(rela.sym_index as usize) {
                    if !sym.name.is_empty() {
                        slots.insert(rela.offset, sym.name.clone());
                    }
                }
            }
        }
        AnnotationContext { symbols, slots }
    }

    /// Resolve the name a call to `target` ends up in: a function symbol at
    /// the address, or an import reached through a PLT-style `jmp [rip+d]`
    /// (optionally behind an endbr64).
    fn call_name(&self, image: &ElfImage, target: u64) -> Option<String> {
        if let Some((name, SymbolType::Func)) = self.symbols.get(&target) {
            return Some(name.clone());
        }
        let mut at = target;
        let head = image.read_vaddr(at, 4);
        if head == Some(&[0xf3, 0x0f, 0x1e, 0xfa]) {
            at += 4;
        }
        // IBT-era PLT stubs prefix the jump with bnd (f2).
        if image.read_vaddr(at, 1) == Some(&[0xf2]) {
            at += 1;
        }
        let jmp = image.read_vaddr(at, 6)?;
        if jmp[0] == 0xff && jmp[1] == 0x25 {
            let disp = i32::from_le_bytes(jmp[2..6].try_into().unwrap()) as i64;
            let slot = (at + 6).wrapping_add(disp as u64);
            return self.slots.get(&slot).cloned();
        }
        None
    }

    /// A printable NUL-terminated string at `vaddr` in a non-executable
    /// section, at least 4 characters, capped at 64.
    fn string_at(&self, image: &ElfImage, vaddr: u64) -> Option<String> {
        let (_, sec) = image.section_at_vaddr(vaddr)?;
        if sec.is_exec() || sec.data.is_empty() {
            return None;
        }
        let start = (vaddr - sec.sh_addr) as usize;
        let window = sec.data.get(start..sec.data.len().min(start + 65))?;
        let nul = window.iter().position(|&b| b == 0)?;
        if !(4..=64).contains(&nul) {
            return None;
        }
        let s = &window[..nul];
        if s.iter().all(|&b| (0x20..0x7f).contains(&b)) {
            Some(String::from_utf8_lossy(s).into_owned())
        } else {
            None
        }
    }

    fn annotate(&self, image: &ElfImage, insn: &mut Instruction) {
        let mut out: Vec<Annotation> = Vec::new();
        let mut push = |kind: AnnotationKind, name: String| {
            if !out.iter().any(|a| a.kind == kind && a.name == name) {
                out.push(Annotation { kind, name });
            }
        };
        for op in &insn.operands {
            match op {
                Operand::Rel { target, .. } if insn.mnemonic == "call" => {
                    if let Some(name) = self.call_name(image, *target) {
                        push(AnnotationKind::CallTarget, name);
                    }
                }
                Operand::Mem(m) if m.rip_relative => {
                    let target = insn
                        .vaddr
                        .wrapping_add(insn.length as u64)
                        .wrapping_add(m.disp as u64);
                    self.annotate_data_ref(image, target, &mut push);
                }
                Operand::Imm { value, .. } => {
                    let target = *value as u64;
                    if image.section_at_vaddr(target).is_some() {
                        self.annotate_data_ref(image, target, &mut push);
                    }
                }
                _ => {}
            }
        }
        insn.annotations = out;
    }

    fn annotate_data_ref(
        &self,
        image: &ElfImage,
        target: u64,
        push: &mut impl FnMut(AnnotationKind, String),
    ) {
        if let Some((kind, name)) = self.data_ref_name(image, target) {
            push(kind, name);
        }
    }

    /// The annotation a data reference to `target` resolves to, if any.
    /// This is the exact rule `annotate` applies, exposed so the rewriter
    /// can predict and avoid annotations when it relocates address loads.
    pub(crate) fn data_ref_name(
        &self,
        image: &ElfImage,
        target: u64,
    ) -> Option<(AnnotationKind, String)> {
        if let Some((name, ty)) = self.symbols.get(&target) {
            let prefixed = match ty {
                SymbolType::Object => format!("obj.{name}"),
                _ => format!("sym.{name}"),
            };
            Some((AnnotationKind::SymbolRef, prefixed))
        } else {
            self.string_at(image, target)
                .map(|s| (AnnotationKind::StringRef, s))
        }
    }
}

pub(crate) fn function_roots(image: &ElfImage) -> Vec<u64> {
    let mut roots = Vec::new();
    if image.header.e_entry != 0 {
        roots.push(image.header.e_entry);
    }
    let mut push_syms = |syms: Vec<Symbol>| {
        for sym in syms {
            if sym.sym_type == SymbolType::Func && sym.is_defined() && sym.value != 0 {
                roots.push(sym.value);
            }
        }
    };
    push_syms(image.symbols(SymbolTableKind::Symtab).unwrap_or_default());
    push_syms(image.symbols(SymbolTableKind::Dynsym).unwrap_or_default());
    roots.sort_unstable();
    roots.dedup();
    roots
}

/// Symbol-guided sweep: straight-line decode from each function symbol and
/// the entry point, stopping at `ret`/`jmp`, the end of the executable
/// section, or an address another run already covered.
pub fn code_sweep(image: &ElfImage) -> Vec<Instruction> {
    let ctx = AnnotationContext::build(image);
    let mut visited: HashSet<u64> = HashSet::new();
    let mut out = Vec::new();

    for root in function_roots(image) {
        let Some((_, sec)) = image.section_at_vaddr(root) else {
            continue;
        };
        if !sec.is_exec() || sec.data.is_empty() {
            continue;
        }
        let sec_addr = sec.sh_addr;
        let sec_data = &sec.data;
        let mut pos = (root - sec_addr) as usize;
        while pos < sec_data.len() {
            let vaddr = sec_addr + pos as u64;
            if !visited.insert(vaddr) {
                break;
            }
            let mut insn = decode_one(sec_data, pos, vaddr);
            if pos + insn.length as usize > sec_data.len() {
                // Truncated tail; treat as a raw byte and stop.
                insn.length = 1;
                insn.mnemonic = "db";
                insn.operands = vec![Operand::Imm {
                    value: sec_data[pos] as i64,
                    op_size: 1,
                    enc_width: 1,
                }];
            }
            insn.file_offset = image.vaddr_to_offset(vaddr).unwrap_or(0);
            ctx.annotate(image, &mut insn);
            let terminator = insn.is_terminator();
            pos += insn.length as usize;
            out.push(insn);
            if terminator {
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elf::{NewSection, SHF_ALLOC, SHF_EXECINSTR, SymbolBinding, SHN_UNDEF};
    use std::process::Command;

    fn compile(dir: &std::path::Path, source: &str) -> Vec<u8> {
        let src = dir.join("prog.c");
        std::fs::write(&src, source).unwrap();
        let out = dir.join("prog");
        let status = Command::new("gcc")
            .args(["-O0", "-o"])
            .arg(&out)
            .arg(&src)
            .status()
            .expect("gcc not available");
        assert!(status.success());
        std::fs::read(&out).unwrap()
    }

    #[test]
    fn linear_sweep_covers_every_byte_exactly_once() {
        let bytes = std::fs::read("/usr/bin/true")
            .or_else(|_| std::fs::read("/bin/true"))
            .unwrap();
        let mut covered = 0u64;
        let mut prev_end = 0u64;
        for insn in linear_sweep(&bytes) {
            assert_eq!(insn.file_offset, prev_end);
            covered += insn.length as u64;
            prev_end = insn.file_offset + insn.length as u64;
        }
        assert_eq!(covered, bytes.len() as u64);
    }

    #[test]
    fn linear_sweep_sees_injected_noncode_bytes() {
        let bytes = std::fs::read("/usr/bin/true")
            .or_else(|_| std::fs::read("/bin/true"))
            .unwrap();
        let mut image = ElfImage::parse(&bytes).unwrap();
        let before: usize = linear_sweep(&bytes)
            .filter(|i| i.text() == "or [rax],ebp")
            .count();
        image
            .add_section(NewSection {
                name: ".gw.inject".into(),
                sh_type: crate::elf::SHT_PROGBITS,
                flags: 0,
                addralign: 1,
                entsize: 0,
                data: vec![0x09, 0x28],
                reserve_extra: 0,
            })
            .unwrap();
        let mutated = image.serialize().unwrap();
        let after: usize = linear_sweep(&mutated)
            .filter(|i| i.text() == "or [rax],ebp")
            .count();
        assert!(after > before, "injected beats should be decoded");
    }

    #[test]
    fn code_sweep_stays_in_executable_sections() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = compile(
            dir.path(),
            r#"#include <stdio.h>
int helper(int x) { return x * 3; }
int main(void) { printf("%d\n", helper(4)); return 0; }
"#,
        );
        let image = ElfImage::parse(&bytes).unwrap();
        let insns = code_sweep(&image);
        assert!(!insns.is_empty());
        for insn in &insns {
            let (_, sec) = image
                .section_at_vaddr(insn.vaddr)
                .unwrap_or_else(|| panic!("instruction at {:#x} outside sections", insn.vaddr));
            assert!(sec.is_exec(), "instruction at {:#x} in {}", insn.vaddr, sec.name);
        }
        // Every instruction appears exactly once.
        let mut starts: Vec<u64> = insns.iter().map(|i| i.vaddr).collect();
        starts.sort_unstable();
        let len_before = starts.len();
        starts.dedup();
        assert_eq!(starts.len(), len_before);
    }

    #[test]
    fn call_targets_are_annotated_with_names() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = compile(
            dir.path(),
            r#"#include <stdio.h>
int my_helper(int x) { return x + 1; }
int main(void) { printf("%d\n", my_helper(1)); return 0; }
"#,
        );
        let image = ElfImage::parse(&bytes).unwrap();
        let insns = code_sweep(&image);
        let callees: Vec<&str> = insns
            .iter()
            .flat_map(|i| i.annotations.iter())
            .filter(|a| a.kind == AnnotationKind::CallTarget)
            .map(|a| a.name.as_str())
            .collect();
        assert!(callees.contains(&"my_helper"), "local call: {callees:?}");
        assert!(callees.contains(&"printf"), "PLT call: {callees:?}");
    }

    #[test]
    fn string_and_symbol_refs_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = compile(
            dir.path(),
            r#"#include <stdio.h>
int shared_counter = 9;
int main(void) {
    printf("a distinctive literal\n");
    fprintf(stderr, "%d\n", shared_counter);
    return 0;
}
"#,
        );
        let image = ElfImage::parse(&bytes).unwrap();
        let insns = code_sweep(&image);
        let anns: Vec<(AnnotationKind, &str)> = insns
            .iter()
            .flat_map(|i| i.annotations.iter())
            .map(|a| (a.kind, a.name.as_str()))
            .collect();
        assert!(
            anns.contains(&(AnnotationKind::StringRef, "a distinctive literal")),
            "string refs: {anns:?}"
        );
        assert!(
            anns.contains(&(AnnotationKind::SymbolRef, "obj.shared_counter")),
            "symbol refs: {anns:?}"
        );
        assert!(
            anns.contains(&(AnnotationKind::SymbolRef, "obj.stderr")),
            "stderr ref: {anns:?}"
        );
    }

    #[test]
    fn injected_function_appears_exactly_once() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = compile(dir.path(), "int main(void) { return 0; }\n");
        let mut image = ElfImage::parse(&bytes).unwrap();
        // push rbp; pop rbp; ret
        let sec = image
            .add_section(NewSection::progbits(
                ".gw.text",
                SHF_ALLOC | SHF_EXECINSTR,
                vec![0x55, 0x5d, 0xc3],
            ))
            .unwrap();
        let va = image.sections[sec].sh_addr;
        image
            .add_symbol(
                SymbolTableKind::Symtab,
                &crate::elf::Symbol {
                    name: "gw_injected".into(),
                    value: va,
                    size: 3,
                    sym_type: SymbolType::Func,
                    binding: SymbolBinding::Local,
                    visibility: 0,
                    section_index: sec as u16,
                },
            )
            .unwrap();
        let _ = SHN_UNDEF;
        let insns = code_sweep(&image);
        let pushes: Vec<&Instruction> = insns
            .iter()
            .filter(|i| i.vaddr == va && i.text() == "push rbp")
            .collect();
        assert_eq!(pushes.len(), 1);
        let texts: Vec<String> = insns
            .iter()
            .filter(|i| i.vaddr >= va && i.vaddr < va + 3)
            .map(|i| i.text())
            .collect();
        assert_eq!(texts, vec!["push rbp", "pop rbp", "ret"]);
    }
}
