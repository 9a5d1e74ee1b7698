//! Structural mutations: new load segments, sections, symbols, and dynamic
//! imports.
//!
//! All growth happens past the original end of file. Regions vacated by a
//! relocated table keep their original bytes, so the untouched parts of the
//! file never change. The first mutation moves the program header table into
//! a fresh page-aligned segment with slack entries; later segment additions
//! consume the slack in place.

use super::*;

/// Entries reserved beyond the current count when the phdr table moves.
pub const PHDR_SLACK_ENTRIES: u16 = 32;

/// Canonical user-space ceiling on x86-64.
const USER_VA_CEILING: u64 = 1 << 47;

const DYNSYM_GROW_SLACK: u64 = 32 * SYM_SIZE;
const DYNSTR_GROW_SLACK: u64 = 1024;
const VERSYM_GROW_SLACK: u64 = 64 * 2;
const HASH_GROW_SLACK: u64 = 64 * 4;
const RELA_GROW_SLACK: u64 = 32 * RELA_SIZE;
const STRTAB_GROW_SLACK: u64 = 1024;
const SYMTAB_GROW_SLACK: u64 = 64 * SYM_SIZE;

/// Stub pool entry: `jmp [rip+disp32]`, one per imported name.
const STUB_LEN: u64 = 6;
const GOT_POOL_CAPACITY: u64 = 64 * 8;
const STUB_POOL_CAPACITY: u64 = 64 * STUB_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolTableKind {
    Symtab,
    Dynsym,
}

impl SymbolTableKind {
    pub fn section_name(self) -> &'static str {
        match self {
            SymbolTableKind::Symtab => ".symtab",
            SymbolTableKind::Dynsym => ".dynsym",
        }
    }
    pub fn sh_type(self) -> u32 {
        match self {
            SymbolTableKind::Symtab => SHT_SYMTAB,
            SymbolTableKind::Dynsym => SHT_DYNSYM,
        }
    }
}

/// Description of a section to append.
#[derive(Debug, Clone)]
pub struct NewSection {
    pub name: String,
    pub sh_type: u32,
    pub flags: u64,
    pub addralign: u64,
    pub entsize: u64,
    pub data: Vec<u8>,
    /// Extra file bytes reserved past the data so the section can grow in
    /// place later.
    pub reserve_extra: u64,
}

impl NewSection {
    pub fn progbits(name: &str, flags: u64, data: Vec<u8>) -> Self {
        NewSection {
            name: name.to_string(),
            sh_type: SHT_PROGBITS,
            flags,
            addralign: 8,
            entsize: 0,
            data,
            reserve_extra: 0,
        }
    }
}

fn segment_flags_for(sh_flags: u64) -> u32 {
    let mut f = PF_R;
    if sh_flags & SHF_WRITE != 0 {
        f |= PF_W;
    }
    if sh_flags & SHF_EXECINSTR != 0 {
        f |= PF_X;
    }
    f
}

/// SysV ELF hash, as specified by the gABI.
pub fn sysv_hash(name: &str) -> u32 {
    let mut h: u32 = 0;
    for &b in name.as_bytes() {
        h = (h << 4).wrapping_add(b as u32);
        let g = h & 0xf000_0000;
        if g != 0 {
            h ^= g >> 24;
        }
        h &= !g;
    }
    h
}

impl ElfImage {
    fn reserve_of(&self, idx: usize) -> u64 {
        self.section_reserve
            .get(&idx)
            .copied()
            .unwrap_or(self.sections[idx].sh_size)
            .max(self.sections[idx].sh_size)
    }

    fn next_load_vaddr(&self) -> Result<u64> {
        let end = self
            .load_segments()
            .map(|ph| ph.p_vaddr + ph.p_memsz)
            .max()
            .ok_or_else(|| ElfError::Malformed("no PT_LOAD segment".into()))?;
        Ok(align_up(end, PAGE_SIZE))
    }

    /// Move the section header table past everything else.
    fn place_shdr_at_end(&mut self) {
        self.header.e_shoff = align_up(self.extent_without_shdr(), 8);
    }

    /// Make room for `extra` more program headers, relocating the table into
    /// a fresh carrier segment when the slack is gone.
    fn ensure_phdr_capacity(&mut self, extra: u16) -> Result<()> {
        if self.phdr_slack >= extra {
            return Ok(());
        }
        let count_after = self.program_headers.len() as u64 + 1;
        let capacity = count_after + extra as u64 + PHDR_SLACK_ENTRIES as u64;
        let table_size = capacity * PHDR_SIZE;
        let offset = align_up(self.extent_without_shdr(), PAGE_SIZE);
        let vaddr = self.next_load_vaddr()?;
        if vaddr.checked_add(table_size).is_none_or(|end| end >= USER_VA_CEILING) {
            return Err(ElfError::AddressSpaceExhausted);
        }
        self.program_headers.push(ProgramHeader {
            p_type: PT_LOAD,
            p_flags: PF_R,
            p_offset: offset,
            p_vaddr: vaddr,
            p_paddr: vaddr,
            p_filesz: table_size,
            p_memsz: table_size,
            p_align: PAGE_SIZE,
        });
        self.header.e_phoff = offset;
        self.phdr_slack = (extra as u64 + PHDR_SLACK_ENTRIES as u64) as u16;
        self.sync_pt_phdr(vaddr, offset);
        Ok(())
    }

    fn sync_pt_phdr(&mut self, vaddr: u64, offset: u64) {
        let size = self.program_headers.len() as u64 * PHDR_SIZE;
        if let Some(ph) = self
            .program_headers
            .iter_mut()
            .find(|ph| ph.p_type == PT_PHDR)
        {
            ph.p_offset = offset;
            ph.p_vaddr = vaddr;
            ph.p_paddr = vaddr;
            ph.p_filesz = size;
            ph.p_memsz = size;
        }
    }

    fn push_phdr(&mut self, ph: ProgramHeader) -> Result<()> {
        self.ensure_phdr_capacity(1)?;
        self.phdr_slack -= 1;
        self.program_headers.push(ph);
        let (offset, vaddr) = {
            let e_phoff = self.header.e_phoff;
            let va = self
                .offset_to_vaddr(e_phoff)
                .unwrap_or(e_phoff);
            (e_phoff, va)
        };
        self.sync_pt_phdr(vaddr, offset);
        Ok(())
    }

    /// Append a fresh PT_LOAD segment and return (file offset, vaddr) of its
    /// start. The region is zero-filled until a section claims it.
    pub fn alloc_load(&mut self, size: u64, flags: u32) -> Result<(u64, u64)> {
        self.ensure_phdr_capacity(1)?;
        let offset = align_up(self.extent_without_shdr(), PAGE_SIZE);
        let vaddr = self.next_load_vaddr()?;
        if vaddr.checked_add(size).is_none_or(|end| end >= USER_VA_CEILING) {
            return Err(ElfError::AddressSpaceExhausted);
        }
        self.push_phdr(ProgramHeader {
            p_type: PT_LOAD,
            p_flags: flags,
            p_offset: offset,
            p_vaddr: vaddr,
            p_paddr: vaddr,
            p_filesz: size,
            p_memsz: size,
            p_align: PAGE_SIZE,
        })?;
        Ok((offset, vaddr))
    }

    /// Append `name` to .shstrtab and return its offset.
    fn shstrtab_add(&mut self, name: &str) -> Result<u32> {
        let idx = self.header.e_shstrndx as usize;
        if idx >= self.sections.len() {
            return Err(ElfError::Malformed(format!(
                "e_shstrndx {idx} out of range"
            )));
        }
        let mut data = self.sections[idx].data.clone();
        let name_off = data.len() as u32;
        data.extend_from_slice(name.as_bytes());
        data.push(0);
        self.grow_nonalloc_section(idx, data, STRTAB_GROW_SLACK)?;
        Ok(name_off)
    }

    /// Replace a non-alloc section's data, moving it to the end of the file
    /// when it no longer fits its reserved room.
    fn grow_nonalloc_section(&mut self, idx: usize, data: Vec<u8>, slack: u64) -> Result<()> {
        let new_len = data.len() as u64;
        if new_len <= self.reserve_of(idx) {
            let s = &mut self.sections[idx];
            s.data = data;
            s.sh_size = new_len;
            return Ok(());
        }
        let align = self.sections[idx].sh_addralign.max(1);
        let offset = align_up(self.extent_without_shdr(), align);
        let s = &mut self.sections[idx];
        s.sh_offset = offset;
        s.sh_size = new_len;
        s.data = data;
        self.section_reserve.insert(idx, new_len + slack);
        Ok(())
    }

    /// Replace an alloc section's data. Grows in place while the reserved
    /// room lasts, otherwise relocates the section into a fresh segment and
    /// leaves the old bytes behind as dead padding.
    fn grow_alloc_section(&mut self, idx: usize, data: Vec<u8>, slack: u64) -> Result<()> {
        let new_len = data.len() as u64;
        if new_len <= self.reserve_of(idx) {
            let s = &mut self.sections[idx];
            s.data = data;
            s.sh_size = new_len;
            return Ok(());
        }
        let reserve = new_len + slack;
        let flags = segment_flags_for(self.sections[idx].sh_flags);
        let (offset, vaddr) = self.alloc_load(reserve, flags)?;
        let s = &mut self.sections[idx];
        s.sh_offset = offset;
        s.sh_addr = vaddr;
        s.sh_size = new_len;
        s.data = data;
        self.section_reserve.insert(idx, reserve);
        Ok(())
    }

    /// Append a section. Alloc sections get their own PT_LOAD segment sized
    /// for the data plus any reserve; non-alloc sections are placed at the
    /// current end of file.
    pub fn add_section(&mut self, spec: NewSection) -> Result<usize> {
        if spec.sh_type == SHT_NOBITS {
            return Err(ElfError::Malformed(
                "adding SHT_NOBITS sections is not supported".into(),
            ));
        }
        let sh_name = self.shstrtab_add(&spec.name)?;
        let idx = self.sections.len();
        let size = spec.data.len() as u64;
        let reserve = size + spec.reserve_extra;
        let (sh_offset, sh_addr) = if spec.flags & SHF_ALLOC != 0 {
            if reserve == 0 {
                return Err(ElfError::Malformed(format!(
                    "alloc section {} has no size and no reserve",
                    spec.name
                )));
            }
            self.alloc_load(reserve, segment_flags_for(spec.flags))?
        } else {
            let off = align_up(self.extent_without_shdr(), spec.addralign.max(1));
            (off, 0)
        };
        self.sections.push(Section {
            name: spec.name,
            sh_name,
            sh_type: spec.sh_type,
            sh_flags: spec.flags,
            sh_addr,
            sh_offset,
            sh_size: size,
            sh_link: 0,
            sh_info: 0,
            sh_addralign: spec.addralign,
            sh_entsize: spec.entsize,
            data: spec.data,
        });
        self.original_placement.push(None);
        if reserve > size {
            self.section_reserve.insert(idx, reserve);
        }
        self.place_shdr_at_end();
        Ok(idx)
    }

    /// Append bytes to a growable alloc section and return the vaddr where
    /// they landed. The section must never move, so the caller is expected
    /// to stay within the reserve established at creation.
    pub(crate) fn append_to_alloc_section(&mut self, idx: usize, bytes: &[u8]) -> Result<u64> {
        let s = &self.sections[idx];
        let old_len = s.data.len() as u64;
        let vaddr = s.sh_addr + old_len;
        if old_len + bytes.len() as u64 > self.reserve_of(idx) {
            return Err(ElfError::LayoutConflict(format!(
                "section {} ({}) reserve exhausted",
                idx, self.sections[idx].name
            )));
        }
        let mut data = self.sections[idx].data.clone();
        data.extend_from_slice(bytes);
        self.grow_alloc_section(idx, data, 0)?;
        Ok(vaddr)
    }

    pub(crate) fn remaining_reserve(&self, idx: usize) -> u64 {
        self.reserve_of(idx) - self.sections[idx].sh_size
    }

    fn ensure_symtab(&mut self) -> Result<(usize, usize)> {
        if let Some(i) = self.sections.iter().position(|s| s.sh_type == SHT_SYMTAB) {
            let link = self.sections[i].sh_link as usize;
            if link >= self.sections.len() {
                return Err(ElfError::Malformed(format!(
                    ".symtab sh_link {link} out of range"
                )));
            }
            return Ok((i, link));
        }
        let strtab_idx = self.add_section(NewSection {
            name: ".strtab".into(),
            sh_type: SHT_STRTAB,
            flags: 0,
            addralign: 1,
            entsize: 0,
            data: vec![0],
            reserve_extra: STRTAB_GROW_SLACK,
        })?;
        let symtab_idx = self.add_section(NewSection {
            name: ".symtab".into(),
            sh_type: SHT_SYMTAB,
            flags: 0,
            addralign: 8,
            entsize: SYM_SIZE,
            data: vec![0; SYM_SIZE as usize],
            reserve_extra: SYMTAB_GROW_SLACK,
        })?;
        self.sections[symtab_idx].sh_link = strtab_idx as u32;
        self.sections[symtab_idx].sh_info = 1;
        Ok((symtab_idx, strtab_idx))
    }

    /// Append a string to the string table section `idx`, returning the
    /// offset of the new string.
    fn strtab_add(&mut self, idx: usize, name: &str, alloc: bool) -> Result<u32> {
        let mut data = self.sections[idx].data.clone();
        if data.is_empty() {
            data.push(0);
        }
        let off = data.len() as u32;
        data.extend_from_slice(name.as_bytes());
        data.push(0);
        if alloc {
            self.grow_alloc_section(idx, data, DYNSTR_GROW_SLACK)?;
        } else {
            self.grow_nonalloc_section(idx, data, STRTAB_GROW_SLACK)?;
        }
        Ok(off)
    }

    /// Add a symbol to .symtab or .dynsym, returning its index.
    ///
    /// Symtab local symbols are inserted before the first global to keep the
    /// binding convention; nothing in a linked executable refers to symtab
    /// entries by index, so the shift is safe. Dynsym entries are strictly
    /// appended because relocations, hash tables and versym rows address
    /// them by index.
    pub fn add_symbol(&mut self, kind: SymbolTableKind, sym: &Symbol) -> Result<usize> {
        let idx = match kind {
            SymbolTableKind::Symtab => {
                let (symtab_idx, strtab_idx) = self.ensure_symtab()?;
                let name_off = if sym.name.is_empty() {
                    0
                } else {
                    self.strtab_add(strtab_idx, &sym.name, false)?
                };
                let sec = &self.sections[symtab_idx];
                let count = (sec.sh_size / SYM_SIZE) as usize;
                let first_global = (sec.sh_info as usize).min(count);
                let pos = if sym.binding == SymbolBinding::Local {
                    first_global
                } else {
                    count
                };
                let entry = sym.encode(name_off);
                let mut data = self.sections[symtab_idx].data.clone();
                let at = pos * SYM_SIZE as usize;
                data.splice(at..at, entry.iter().copied());
                self.grow_nonalloc_section(symtab_idx, data, SYMTAB_GROW_SLACK)?;
                if sym.binding == SymbolBinding::Local {
                    self.sections[symtab_idx].sh_info += 1;
                }
                pos
            }
            SymbolTableKind::Dynsym => self.append_dynsym_symbol(sym)? as usize,
        };
        self.place_shdr_at_end();
        Ok(idx)
    }

    fn dynamic_section_index(&self) -> Result<usize> {
        self.sections
            .iter()
            .position(|s| s.sh_type == SHT_DYNAMIC)
            .ok_or(ElfError::MissingDynamicSegment)
    }

    /// Overwrite the value of an existing dynamic tag. Returns false if the
    /// tag is absent.
    fn patch_dynamic(&mut self, tag: i64, value: u64) -> Result<bool> {
        let idx = self.dynamic_section_index()?;
        let data = &mut self.sections[idx].data;
        for chunk_start in (0..data.len()).step_by(DYN_SIZE as usize) {
            if chunk_start + DYN_SIZE as usize > data.len() {
                break;
            }
            let t = i64::from_le_bytes(data[chunk_start..chunk_start + 8].try_into().unwrap());
            if t == DT_NULL {
                break;
            }
            if t == tag {
                data[chunk_start + 8..chunk_start + 16].copy_from_slice(&value.to_le_bytes());
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Set a dynamic tag, rebuilding .dynamic in a fresh writable segment
    /// when the tag has to be added. The loader writes into .dynamic at
    /// startup (DT_DEBUG), so the new home must stay writable.
    fn ensure_dynamic_tag(&mut self, tag: i64, value: u64) -> Result<()> {
        if self.patch_dynamic(tag, value)? {
            return Ok(());
        }
        let idx = self.dynamic_section_index()?;
        let entries = self.dynamic_entries();
        let mut data = Vec::with_capacity((entries.len() + 2) * DYN_SIZE as usize);
        for e in &entries {
            data.extend_from_slice(&e.tag.to_le_bytes());
            data.extend_from_slice(&e.value.to_le_bytes());
        }
        data.extend_from_slice(&tag.to_le_bytes());
        data.extend_from_slice(&value.to_le_bytes());
        data.extend_from_slice(&[0u8; DYN_SIZE as usize]);
        let new_len = data.len() as u64;
        let (offset, vaddr) = self.alloc_load(new_len, PF_R | PF_W)?;
        let s = &mut self.sections[idx];
        s.sh_offset = offset;
        s.sh_addr = vaddr;
        s.sh_size = new_len;
        s.sh_flags |= SHF_WRITE;
        s.data = data;
        self.section_reserve.insert(idx, new_len);
        for ph in &mut self.program_headers {
            if ph.p_type == PT_DYNAMIC {
                ph.p_offset = offset;
                ph.p_vaddr = vaddr;
                ph.p_paddr = vaddr;
                ph.p_filesz = new_len;
                ph.p_memsz = new_len;
            }
        }
        Ok(())
    }

    fn append_dynsym_symbol(&mut self, sym: &Symbol) -> Result<u32> {
        if !self.is_dynamic() {
            return Err(ElfError::NotDynamic);
        }
        let dynsym_idx = self
            .sections
            .iter()
            .position(|s| s.sh_type == SHT_DYNSYM)
            .ok_or(ElfError::MissingDynamicSegment)?;
        let dynstr_idx = self.sections[dynsym_idx].sh_link as usize;
        if dynstr_idx >= self.sections.len() {
            return Err(ElfError::Malformed(format!(
                ".dynsym sh_link {dynstr_idx} out of range"
            )));
        }

        let name_off = if sym.name.is_empty() {
            0
        } else {
            self.strtab_add(dynstr_idx, &sym.name, true)?
        };
        self.patch_dynamic(DT_STRTAB, self.sections[dynstr_idx].sh_addr)?;
        self.patch_dynamic(DT_STRSZ, self.sections[dynstr_idx].sh_size)?;

        let new_index = (self.sections[dynsym_idx].sh_size / SYM_SIZE) as u32;
        let mut data = self.sections[dynsym_idx].data.clone();
        data.extend_from_slice(&sym.encode(name_off));
        self.grow_alloc_section(dynsym_idx, data, DYNSYM_GROW_SLACK)?;
        self.patch_dynamic(DT_SYMTAB, self.sections[dynsym_idx].sh_addr)?;

        // The versym table runs in lockstep with dynsym: the loader reads
        // versym[i] for every relocation symbol i, so it must cover the new
        // entry. Index 1 is the unversioned global.
        if let Some(versym_addr) = self.dynamic_value(DT_VERSYM) {
            if let Some((vs_idx, _)) = self.section_at_vaddr(versym_addr) {
                let mut data = self.sections[vs_idx].data.clone();
                data.extend_from_slice(&1u16.to_le_bytes());
                self.grow_alloc_section(vs_idx, data, VERSYM_GROW_SLACK)?;
                self.patch_dynamic(DT_VERSYM, self.sections[vs_idx].sh_addr)?;
            }
        }

        // SysV hash iterates symbols through nchain, so rebuild it with the
        // new count. A GNU hash table, if present, is left alone: the new
        // entry is undefined and never needs to be found by name lookup.
        if let Some(hash_addr) = self.dynamic_value(DT_HASH) {
            if let Some((hash_idx, _)) = self.section_at_vaddr(hash_addr) {
                let symbols = self.symbols(SymbolTableKind::Dynsym)?;
                let old = &self.sections[hash_idx].data;
                let nbucket = if old.len() >= 4 {
                    u32::from_le_bytes(old[0..4].try_into().unwrap()).max(1)
                } else {
                    1
                };
                let nchain = symbols.len() as u32;
                let mut buckets = vec![0u32; nbucket as usize];
                let mut chains = vec![0u32; nchain as usize];
                for (i, s) in symbols.iter().enumerate().skip(1) {
                    let b = (sysv_hash(&s.name) % nbucket) as usize;
                    chains[i] = buckets[b];
                    buckets[b] = i as u32;
                }
                let mut data = Vec::with_capacity(8 + 4 * (nbucket + nchain) as usize);
                data.extend_from_slice(&nbucket.to_le_bytes());
                data.extend_from_slice(&nchain.to_le_bytes());
                for v in buckets.iter().chain(chains.iter()) {
                    data.extend_from_slice(&v.to_le_bytes());
                }
                self.grow_alloc_section(hash_idx, data, HASH_GROW_SLACK)?;
                self.patch_dynamic(DT_HASH, self.sections[hash_idx].sh_addr)?;
            }
        }

        Ok(new_index)
    }

    /// Append one relocation to the DT_RELA table, creating the table when
    /// the binary has none.
    fn append_rela(&mut self, rela: Rela) -> Result<()> {
        let mut entry = Vec::with_capacity(RELA_SIZE as usize);
        entry.extend_from_slice(&rela.offset.to_le_bytes());
        let info = ((rela.sym_index as u64) << 32) | rela.r_type as u64;
        entry.extend_from_slice(&info.to_le_bytes());
        entry.extend_from_slice(&rela.addend.to_le_bytes());

        if let Some(rela_addr) = self.dynamic_value(DT_RELA) {
            let (idx, _) = self.section_at_vaddr(rela_addr).ok_or_else(|| {
                ElfError::Malformed(format!("DT_RELA {rela_addr:#x} not in any section"))
            })?;
            let mut data = self.sections[idx].data.clone();
            data.extend_from_slice(&entry);
            self.grow_alloc_section(idx, data, RELA_GROW_SLACK)?;
            self.ensure_dynamic_tag(DT_RELA, self.sections[idx].sh_addr)?;
            self.ensure_dynamic_tag(DT_RELASZ, self.sections[idx].sh_size)?;
        } else {
            let idx = self.add_section(NewSection {
                name: ".gw.rela".into(),
                sh_type: SHT_RELA,
                flags: SHF_ALLOC,
                addralign: 8,
                entsize: RELA_SIZE,
                data: entry,
                reserve_extra: RELA_GROW_SLACK,
            })?;
            self.ensure_dynamic_tag(DT_RELA, self.sections[idx].sh_addr)?;
            self.ensure_dynamic_tag(DT_RELASZ, self.sections[idx].sh_size)?;
            self.ensure_dynamic_tag(DT_RELAENT, RELA_SIZE)?;
        }
        Ok(())
    }

    fn pool_section(&mut self, prefix: &str, flags: u64, capacity: u64, need: u64) -> Result<usize> {
        let existing = self
            .sections
            .iter()
            .enumerate()
            .filter(|(_, s)| s.name.starts_with(prefix))
            .map(|(i, _)| i)
            .collect::<Vec<_>>();
        if let Some(&idx) = existing.last() {
            if self.remaining_reserve(idx) >= need {
                return Ok(idx);
            }
        }
        let name = if existing.is_empty() {
            prefix.to_string()
        } else {
            format!("{prefix}.{}", existing.len())
        };
        self.add_section(NewSection {
            name,
            sh_type: SHT_PROGBITS,
            flags,
            addralign: 8,
            entsize: 0,
            data: Vec::new(),
            reserve_extra: capacity,
        })
    }

    /// Build a 6-byte `jmp [rip+disp]` stub that jumps through `slot_vaddr`.
    fn emit_stub(&mut self, slot_vaddr: u64) -> Result<u64> {
        let plt_idx = self.pool_section(".gw.plt", SHF_ALLOC | SHF_EXECINSTR, STUB_POOL_CAPACITY, STUB_LEN)?;
        let stub_vaddr = self.sections[plt_idx].sh_addr + self.sections[plt_idx].sh_size;
        let disp = slot_vaddr as i64 - (stub_vaddr as i64 + STUB_LEN as i64);
        let disp: i32 = disp.try_into().map_err(|_| {
            ElfError::LayoutConflict(format!(
                "stub at {stub_vaddr:#x} cannot reach slot {slot_vaddr:#x}"
            ))
        })?;
        let mut stub = vec![0xff, 0x25];
        stub.extend_from_slice(&disp.to_le_bytes());
        self.append_to_alloc_section(plt_idx, &stub)
    }

    /// Import `name` from the dynamic link scope: new dynsym entry, a
    /// writable slot, a GLOB_DAT relocation filling the slot at startup, and
    /// an executable stub that jumps through the slot. Returns the stub
    /// address. The entry is weak so an unresolvable name leaves the slot
    /// null instead of failing the load.
    pub fn add_dynamic_import(&mut self, name: &str) -> Result<u64> {
        if !self.is_dynamic() {
            return Err(ElfError::NotDynamic);
        }
        let existing = self.symbols(SymbolTableKind::Dynsym)?;
        if existing.iter().any(|s| s.name == name) {
            return Err(ElfError::DuplicateDynamicName(name.to_string()));
        }
        let sym_index = self.append_dynsym_symbol(&Symbol {
            name: name.to_string(),
            value: 0,
            size: 0,
            sym_type: SymbolType::Func,
            binding: SymbolBinding::Weak,
            visibility: 0,
            section_index: SHN_UNDEF,
        })?;
        let got_idx = self.pool_section(".gw.got", SHF_ALLOC | SHF_WRITE, GOT_POOL_CAPACITY, 8)?;
        let slot_vaddr = self.append_to_alloc_section(got_idx, &[0u8; 8])?;
        self.append_rela(Rela {
            offset: slot_vaddr,
            sym_index,
            r_type: R_X86_64_GLOB_DAT,
            addend: 0,
        })?;
        let stub_vaddr = self.emit_stub(slot_vaddr)?;
        self.import_stubs.insert(name.to_string(), stub_vaddr);
        self.place_shdr_at_end();
        Ok(stub_vaddr)
    }

    /// A vaddr that a near call can target to reach `name`.
    ///
    /// Preference order: a stub already built for the name, the name's own
    /// definition when the binary defines it, a stub through the GOT slot of
    /// an existing import, and finally a fresh dynamic import.
    pub fn import_callable(&mut self, name: &str) -> Result<u64> {
        if let Some(&va) = self.import_stubs.get(name) {
            return Ok(va);
        }
        for kind in [SymbolTableKind::Dynsym, SymbolTableKind::Symtab] {
            if let Some(sym) = self
                .symbols(kind)?
                .iter()
                .find(|s| s.name == name && s.is_defined() && s.sym_type == SymbolType::Func)
            {
                return Ok(sym.value);
            }
        }
        let dynsyms = self.symbols(SymbolTableKind::Dynsym)?;
        if let Some(pos) = dynsyms
            .iter()
            .position(|s| s.name == name && !s.is_defined())
        {
            let slot = self.relocations().iter().find_map(|r| {
                (r.sym_index as usize == pos
                    && (r.r_type == R_X86_64_JUMP_SLOT || r.r_type == R_X86_64_GLOB_DAT))
                    .then_some(r.offset)
            });
            if let Some(slot_vaddr) = slot {
                let stub = self.emit_stub(slot_vaddr)?;
                self.import_stubs.insert(name.to_string(), stub);
                self.place_shdr_at_end();
                return Ok(stub);
            }
        }
        self.add_dynamic_import(name)
    }

    /// Overwrite bytes inside whatever section maps `vaddr`.
    pub fn patch_bytes_at_vaddr(&mut self, vaddr: u64, bytes: &[u8]) -> Result<()> {
        let (idx, s) = self
            .section_at_vaddr(vaddr)
            .ok_or_else(|| ElfError::Malformed(format!("vaddr {vaddr:#x} not in any section")))?;
        if s.sh_type == SHT_NOBITS {
            return Err(ElfError::Malformed(format!(
                "vaddr {vaddr:#x} is in NOBITS section {}",
                s.name
            )));
        }
        let start = (vaddr - s.sh_addr) as usize;
        let end = start + bytes.len();
        if end > s.data.len() {
            return Err(ElfError::Malformed(format!(
                "patch of {} bytes at {vaddr:#x} crosses end of section {}",
                bytes.len(),
                s.name
            )));
        }
        self.sections[idx].data[start..end].copy_from_slice(bytes);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;
    use std::process::Command;

    fn system_binary() -> &'static str {
        for p in ["/usr/bin/true", "/bin/true"] {
            if std::path::Path::new(p).exists() {
                return p;
            }
        }
        panic!("no true(1) on this system");
    }

    fn compile_c(dir: &std::path::Path, source: &str, extra: &[&str]) -> std::path::PathBuf {
        let src = dir.join("prog.c");
        std::fs::write(&src, source).unwrap();
        let out = dir.join("prog");
        let status = Command::new("gcc")
            .arg("-O0")
            .args(extra)
            .arg("-o")
            .arg(&out)
            .arg(&src)
            .status()
            .expect("gcc not available");
        assert!(status.success(), "gcc failed");
        out
    }

    fn run_image(image: &ElfImage, dir: &std::path::Path) -> std::process::Output {
        use std::os::unix::fs::PermissionsExt;
        let path = dir.join("mutated");
        let bytes = image.serialize().unwrap();
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&bytes).unwrap();
        drop(f);
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        Command::new(&path).output().unwrap()
    }

    #[test]
    fn roundtrip_system_binary() {
        let bytes = std::fs::read(system_binary()).unwrap();
        let image = parse(&bytes).unwrap();
        assert_eq!(image.serialize().unwrap(), bytes);
    }

    #[test]
    fn roundtrip_is_stable_after_reparse() {
        let bytes = std::fs::read(system_binary()).unwrap();
        let image = parse(&bytes).unwrap();
        let once = image.serialize().unwrap();
        let twice = parse(&once).unwrap().serialize().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn added_nonalloc_section_round_trips() {
        let bytes = std::fs::read(system_binary()).unwrap();
        let mut image = parse(&bytes).unwrap();
        let idx = image
            .add_section(NewSection {
                name: ".gw.note".into(),
                sh_type: SHT_PROGBITS,
                flags: 0,
                addralign: 1,
                entsize: 0,
                data: b"hello there".to_vec(),
                reserve_extra: 0,
            })
            .unwrap();
        assert!(image.validate().is_empty(), "{:?}", image.validate());
        let out = image.serialize().unwrap();
        let re = parse(&out).unwrap();
        assert_eq!(re.sections[idx].name, ".gw.note");
        assert_eq!(re.sections[idx].data, b"hello there");
    }

    #[test]
    fn added_alloc_section_gets_mapped_segment() {
        let bytes = std::fs::read(system_binary()).unwrap();
        let mut image = parse(&bytes).unwrap();
        let n_loads_before = image.load_segments().count();
        let idx = image
            .add_section(NewSection::progbits(
                ".gw.text",
                SHF_ALLOC | SHF_EXECINSTR,
                vec![0xc3],
            ))
            .unwrap();
        // Carrier for the relocated phdr table plus the section's own segment.
        assert_eq!(image.load_segments().count(), n_loads_before + 2);
        assert!(image.validate().is_empty(), "{:?}", image.validate());
        let re = parse(&image.serialize().unwrap()).unwrap();
        let s = &re.sections[idx];
        assert!(s.is_exec());
        assert!(re.vaddr_is_mapped(s.sh_addr));
        assert_eq!(re.read_vaddr(s.sh_addr, 1).unwrap(), &[0xc3]);
    }

    #[test]
    fn mutated_system_binary_still_runs() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = std::fs::read(system_binary()).unwrap();
        let mut image = parse(&bytes).unwrap();
        image
            .add_section(NewSection::progbits(
                ".gw.text",
                SHF_ALLOC | SHF_EXECINSTR,
                vec![0xc3; 64],
            ))
            .unwrap();
        image
            .add_symbol(
                SymbolTableKind::Symtab,
                &Symbol {
                    name: "gw_marker".into(),
                    value: image.sections.last().unwrap().sh_addr,
                    size: 64,
                    sym_type: SymbolType::Func,
                    binding: SymbolBinding::Local,
                    visibility: 0,
                    section_index: (image.sections.len() - 1) as u16,
                },
            )
            .unwrap();
        assert!(image.validate().is_empty(), "{:?}", image.validate());
        let out = run_image(&image, dir.path());
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }

    #[test]
    fn symbol_lands_in_table_and_resolves() {
        let bytes = std::fs::read(system_binary()).unwrap();
        let mut image = parse(&bytes).unwrap();
        let sec = image
            .add_section(NewSection::progbits(
                ".gw.text",
                SHF_ALLOC | SHF_EXECINSTR,
                vec![0xc3],
            ))
            .unwrap();
        let va = image.sections[sec].sh_addr;
        image
            .add_symbol(
                SymbolTableKind::Symtab,
                &Symbol {
                    name: "planted_function".into(),
                    value: va,
                    size: 1,
                    sym_type: SymbolType::Func,
                    binding: SymbolBinding::Global,
                    visibility: 0,
                    section_index: sec as u16,
                },
            )
            .unwrap();
        let re = parse(&image.serialize().unwrap()).unwrap();
        let syms = re.symbols(SymbolTableKind::Symtab).unwrap();
        let found = syms.iter().find(|s| s.name == "planted_function").unwrap();
        assert_eq!(found.value, va);
        assert_eq!(found.sym_type, SymbolType::Func);
        assert!(re.validate().is_empty());
    }

    #[test]
    fn local_symbols_insert_before_globals() {
        let bytes = std::fs::read(system_binary()).unwrap();
        let mut image = parse(&bytes).unwrap();
        for (i, binding) in [
            SymbolBinding::Global,
            SymbolBinding::Local,
            SymbolBinding::Local,
        ]
        .iter()
        .enumerate()
        {
            image
                .add_symbol(
                    SymbolTableKind::Symtab,
                    &Symbol {
                        name: format!("sym_{i}"),
                        value: 0,
                        size: 0,
                        sym_type: SymbolType::NoType,
                        binding: *binding,
                        visibility: 0,
                        section_index: SHN_ABS,
                    },
                )
                .unwrap();
        }
        let re = parse(&image.serialize().unwrap()).unwrap();
        let syms = re.symbols(SymbolTableKind::Symtab).unwrap();
        let symtab = re
            .sections
            .iter()
            .find(|s| s.sh_type == SHT_SYMTAB)
            .unwrap();
        let first_global = symtab.sh_info as usize;
        for (i, s) in syms.iter().enumerate() {
            if i < first_global {
                assert_eq!(s.binding, SymbolBinding::Local, "symbol {i} ({})", s.name);
            }
        }
        assert!(syms.iter().position(|s| s.name == "sym_1").unwrap() < first_global);
    }

    #[test]
    fn dynamic_import_resolves_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let prog = compile_c(
            dir.path(),
            r#"#include <stdio.h>
int main(void) { puts("expected output"); return 0; }
"#,
            &[],
        );
        let bytes = std::fs::read(&prog).unwrap();
        let mut image = parse(&bytes).unwrap();
        let stub = image.add_dynamic_import("getpid").unwrap();
        assert!(image.vaddr_is_mapped(stub));
        assert!(image.validate().is_empty(), "{:?}", image.validate());

        let re = parse(&image.serialize().unwrap()).unwrap();
        let syms = re.symbols(SymbolTableKind::Dynsym).unwrap();
        let pos = syms.iter().position(|s| s.name == "getpid").unwrap();
        assert_eq!(syms[pos].binding, SymbolBinding::Weak);
        assert!(!syms[pos].is_defined());
        assert!(re
            .relocations()
            .iter()
            .any(|r| r.sym_index as usize == pos && r.r_type == R_X86_64_GLOB_DAT));

        let out = run_image(&image, dir.path());
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(out.stdout, b"expected output\n");
    }

    #[test]
    fn unresolvable_weak_import_does_not_break_startup() {
        let dir = tempfile::tempdir().unwrap();
        let prog = compile_c(
            dir.path(),
            "int main(void) { return 42; }\n",
            &[],
        );
        let bytes = std::fs::read(&prog).unwrap();
        let mut image = parse(&bytes).unwrap();
        image.add_dynamic_import("gw_no_such_symbol_anywhere").unwrap();
        let out = run_image(&image, dir.path());
        assert_eq!(out.status.code(), Some(42));
    }

    #[test]
    fn import_existing_name_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prog = compile_c(
            dir.path(),
            r#"#include <stdio.h>
int main(void) { puts("x"); return 0; }
"#,
            &[],
        );
        let bytes = std::fs::read(&prog).unwrap();
        let mut image = parse(&bytes).unwrap();
        assert!(matches!(
            image.add_dynamic_import("puts"),
            Err(ElfError::DuplicateDynamicName(_))
        ));
    }

    #[test]
    fn import_callable_reuses_existing_got_slot() {
        let dir = tempfile::tempdir().unwrap();
        let prog = compile_c(
            dir.path(),
            r#"#include <stdio.h>
int main(void) { puts("x"); return 0; }
"#,
            &[],
        );
        let bytes = std::fs::read(&prog).unwrap();
        let mut image = parse(&bytes).unwrap();
        let before = image.symbols(SymbolTableKind::Dynsym).unwrap().len();
        let stub = image.import_callable("puts").unwrap();
        let after = image.symbols(SymbolTableKind::Dynsym).unwrap().len();
        assert_eq!(before, after, "no new dynsym entry for an existing import");
        assert!(image.vaddr_is_mapped(stub));
        assert_eq!(image.import_callable("puts").unwrap(), stub);
        let out = run_image(&image, dir.path());
        assert!(out.status.success());
    }

    #[test]
    fn many_segments_relocate_phdrs_twice_and_binary_survives() {
        let dir = tempfile::tempdir().unwrap();
        let prog = compile_c(dir.path(), "int main(void) { return 7; }\n", &[]);
        let bytes = std::fs::read(&prog).unwrap();
        let mut image = parse(&bytes).unwrap();
        for i in 0..40 {
            image
                .add_section(NewSection::progbits(
                    &format!(".gw.pad.{i}"),
                    SHF_ALLOC,
                    vec![0xaa; 16],
                ))
                .unwrap();
        }
        assert!(image.validate().is_empty(), "{:?}", image.validate());
        let out = run_image(&image, dir.path());
        assert_eq!(out.status.code(), Some(7));
    }

    #[test]
    fn non_pie_executable_mutates_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let prog = compile_c(
            dir.path(),
            r#"#include <stdio.h>
int main(void) { printf("%d\n", 5); return 0; }
"#,
            &["-no-pie"],
        );
        let bytes = std::fs::read(&prog).unwrap();
        let mut image = parse(&bytes).unwrap();
        assert_eq!(image.header.e_type, ET_EXEC);
        image.add_dynamic_import("getenv").unwrap();
        image
            .add_section(NewSection::progbits(
                ".gw.text",
                SHF_ALLOC | SHF_EXECINSTR,
                vec![0xc3; 16],
            ))
            .unwrap();
        assert!(image.validate().is_empty(), "{:?}", image.validate());
        let out = run_image(&image, dir.path());
        assert!(out.status.success());
        assert_eq!(out.stdout, b"5\n");
    }

    #[test]
    fn conflicting_placement_is_rejected() {
        let bytes = std::fs::read(system_binary()).unwrap();
        let mut image = parse(&bytes).unwrap();
        let a = image
            .add_section(NewSection::progbits(".gw.a", 0, vec![1, 2, 3, 4]))
            .unwrap();
        let b = image
            .add_section(NewSection::progbits(".gw.b", 0, vec![5, 6, 7, 8]))
            .unwrap();
        image.sections[b].sh_offset = image.sections[a].sh_offset;
        assert!(matches!(
            image.serialize(),
            Err(ElfError::LayoutConflict(_))
        ));
    }

    #[test]
    fn patch_bytes_roundtrip() {
        let bytes = std::fs::read(system_binary()).unwrap();
        let mut image = parse(&bytes).unwrap();
        let idx = image
            .add_section(NewSection::progbits(".gw.d", SHF_ALLOC, vec![0u8; 16]))
            .unwrap();
        let va = image.sections[idx].sh_addr + 4;
        image.patch_bytes_at_vaddr(va, &[9, 9, 9]).unwrap();
        assert_eq!(&image.sections[idx].data[4..7], &[9, 9, 9]);
        assert!(image.patch_bytes_at_vaddr(va + 13, &[1, 1]).is_err());
    }

    #[test]
    fn sysv_hash_known_values() {
        // Values from the gABI reference implementation.
        assert_eq!(sysv_hash(""), 0);
        assert_eq!(sysv_hash("printf"), 0x077905a6);
        assert_eq!(sysv_hash("exit"), 0x0006cf04);
        assert_eq!(sysv_hash("syscall"), 0x0b09985c);
    }
}
