//! ELF64 little-endian image model: parse, validate, mutate, re-serialize.
//!
//! The model keeps the original file bytes as a base layer. Serialization
//! writes the structured headers and section contents back over that layer,
//! so an unmutated image serializes to the exact input bytes, and mutations
//! only touch the regions they claim.

mod mutate;

pub use mutate::{NewSection, SymbolTableKind, PHDR_SLACK_ENTRIES};

use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

pub const EI_NIDENT: usize = 16;
pub const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];
pub const ELFCLASS64: u8 = 2;
pub const ELFDATA2LSB: u8 = 1;

pub const ET_EXEC: u16 = 2;
pub const ET_DYN: u16 = 3;

pub const PT_LOAD: u32 = 1;
pub const PT_DYNAMIC: u32 = 2;
pub const PT_INTERP: u32 = 3;
pub const PT_PHDR: u32 = 6;

pub const PF_X: u32 = 1;
pub const PF_W: u32 = 2;
pub const PF_R: u32 = 4;

pub const SHT_NULL: u32 = 0;
pub const SHT_PROGBITS: u32 = 1;
pub const SHT_SYMTAB: u32 = 2;
pub const SHT_STRTAB: u32 = 3;
pub const SHT_RELA: u32 = 4;
pub const SHT_HASH: u32 = 5;
pub const SHT_DYNAMIC: u32 = 6;
pub const SHT_NOBITS: u32 = 8;
pub const SHT_DYNSYM: u32 = 11;

pub const SHF_WRITE: u64 = 0x1;
pub const SHF_ALLOC: u64 = 0x2;
pub const SHF_EXECINSTR: u64 = 0x4;

pub const SHN_UNDEF: u16 = 0;
pub const SHN_LORESERVE: u16 = 0xff00;
pub const SHN_ABS: u16 = 0xfff1;
pub const SHN_COMMON: u16 = 0xfff2;

pub const STT_NOTYPE: u8 = 0;
pub const STT_OBJECT: u8 = 1;
pub const STT_FUNC: u8 = 2;
pub const STT_SECTION: u8 = 3;
pub const STT_FILE: u8 = 4;

pub const STB_LOCAL: u8 = 0;
pub const STB_GLOBAL: u8 = 1;
pub const STB_WEAK: u8 = 2;

pub const DT_NULL: i64 = 0;
pub const DT_HASH: i64 = 4;
pub const DT_STRTAB: i64 = 5;
pub const DT_SYMTAB: i64 = 6;
pub const DT_RELA: i64 = 7;
pub const DT_RELASZ: i64 = 8;
pub const DT_RELAENT: i64 = 9;
pub const DT_STRSZ: i64 = 10;
pub const DT_SYMENT: i64 = 11;
pub const DT_JMPREL: i64 = 23;
pub const DT_PLTRELSZ: i64 = 2;
pub const DT_VERSYM: i64 = 0x6fff_fff0;
pub const DT_GNU_HASH: i64 = 0x6fff_fef5;

pub const R_X86_64_GLOB_DAT: u32 = 6;
pub const R_X86_64_JUMP_SLOT: u32 = 7;

pub const EHDR_SIZE: u64 = 64;
pub const PHDR_SIZE: u64 = 56;
pub const SHDR_SIZE: u64 = 64;
pub const SYM_SIZE: u64 = 24;
pub const RELA_SIZE: u64 = 24;
pub const DYN_SIZE: u64 = 16;
pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("not an ELF file: bad magic")]
    NotElf,
    #[error("unsupported ELF class or encoding: {0}")]
    UnsupportedClass(String),
    #[error("malformed ELF: {0}")]
    Malformed(String),
    #[error("layout conflict: {0}")]
    LayoutConflict(String),
    #[error("virtual address space exhausted")]
    AddressSpaceExhausted,
    #[error("dynamic symbol `{0}` already present")]
    DuplicateDynamicName(String),
    #[error("no dynamic segment or dynamic section in image")]
    MissingDynamicSegment,
    #[error("image is not dynamically linked")]
    NotDynamic,
}

pub type Result<T> = std::result::Result<T, ElfError>;

/// Verbatim ELF64 file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileHeader {
    pub ident: [u8; EI_NIDENT],
    pub e_type: u16,
    pub e_machine: u16,
    pub e_version: u32,
    pub e_entry: u64,
    pub e_phoff: u64,
    pub e_shoff: u64,
    pub e_flags: u32,
    pub e_ehsize: u16,
    pub e_phentsize: u16,
    pub e_phnum: u16,
    pub e_shentsize: u16,
    pub e_shnum: u16,
    pub e_shstrndx: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramHeader {
    pub p_type: u32,
    pub p_flags: u32,
    pub p_offset: u64,
    pub p_vaddr: u64,
    pub p_paddr: u64,
    pub p_filesz: u64,
    pub p_memsz: u64,
    pub p_align: u64,
}

impl ProgramHeader {
    pub fn file_range(&self) -> (u64, u64) {
        (self.p_offset, self.p_offset + self.p_filesz)
    }
    pub fn mem_range(&self) -> (u64, u64) {
        (self.p_vaddr, self.p_vaddr + self.p_memsz)
    }
    pub fn contains_vaddr(&self, vaddr: u64) -> bool {
        vaddr >= self.p_vaddr && vaddr < self.p_vaddr + self.p_memsz
    }
}

/// A section header together with its owned content bytes.
///
/// `data` is empty for `SHT_NOBITS`; for everything else `data.len()` must
/// equal `sh_size`.
#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub sh_name: u32,
    pub sh_type: u32,
    pub sh_flags: u64,
    pub sh_addr: u64,
    pub sh_offset: u64,
    pub sh_size: u64,
    pub sh_link: u32,
    pub sh_info: u32,
    pub sh_addralign: u64,
    pub sh_entsize: u64,
    pub data: Vec<u8>,
}

impl Section {
    pub fn is_alloc(&self) -> bool {
        self.sh_flags & SHF_ALLOC != 0
    }
    pub fn is_exec(&self) -> bool {
        self.sh_flags & SHF_EXECINSTR != 0
    }
    pub fn occupies_file_space(&self) -> bool {
        self.sh_type != SHT_NULL && self.sh_type != SHT_NOBITS && self.sh_size > 0
    }
    pub fn file_range(&self) -> (u64, u64) {
        if self.occupies_file_space() {
            (self.sh_offset, self.sh_offset + self.sh_size)
        } else {
            (self.sh_offset, self.sh_offset)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolType {
    NoType,
    Object,
    Func,
    Section,
    File,
    Other(u8),
}

impl SymbolType {
    pub fn from_raw(raw: u8) -> Self {
        match raw {
            STT_NOTYPE => SymbolType::NoType,
            STT_OBJECT => SymbolType::Object,
            STT_FUNC => SymbolType::Func,
            STT_SECTION => SymbolType::Section,
            STT_FILE => SymbolType::File,
            other => SymbolType::Other(other),
        }
    }
    pub fn to_raw(self) -> u8 {
        match self {
            SymbolType::NoType => STT_NOTYPE,
            SymbolType::Object => STT_OBJECT,
            SymbolType::Func => STT_FUNC,
            SymbolType::Section => STT_SECTION,
            SymbolType::File => STT_FILE,
            SymbolType::Other(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolBinding {
    Local,
    Global,
    Weak,
    Other(u8),
}

impl SymbolBinding {
    pub fn from_raw(raw: u8) -> Self {
        match raw {
            STB_LOCAL => SymbolBinding::Local,
            STB_GLOBAL => SymbolBinding::Global,
            STB_WEAK => SymbolBinding::Weak,
            other => SymbolBinding::Other(other),
        }
    }
    pub fn to_raw(self) -> u8 {
        match self {
            SymbolBinding::Local => STB_LOCAL,
            SymbolBinding::Global => STB_GLOBAL,
            SymbolBinding::Weak => STB_WEAK,
            SymbolBinding::Other(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub value: u64,
    pub size: u64,
    pub sym_type: SymbolType,
    pub binding: SymbolBinding,
    pub visibility: u8,
    pub section_index: u16,
}

impl Symbol {
    pub fn is_defined(&self) -> bool {
        self.section_index != SHN_UNDEF
    }

    fn encode(&self, name_offset: u32) -> [u8; SYM_SIZE as usize] {
        let mut out = [0u8; SYM_SIZE as usize];
        out[0..4].copy_from_slice(&name_offset.to_le_bytes());
        out[4] = (self.binding.to_raw() << 4) | (self.sym_type.to_raw() & 0xf);
        out[5] = self.visibility;
        out[6..8].copy_from_slice(&self.section_index.to_le_bytes());
        out[8..16].copy_from_slice(&self.value.to_le_bytes());
        out[16..24].copy_from_slice(&self.size.to_le_bytes());
        out
    }
}

/// One entry of the `.dynamic` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynEntry {
    pub tag: i64,
    pub value: u64,
}

/// One RELA relocation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rela {
    pub offset: u64,
    pub sym_index: u32,
    pub r_type: u32,
    pub addend: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub invariant: &'static str,
    pub location: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.location)
    }
}

/// In-memory model of an ELF64 executable.
///
/// A plain value: clone it to branch, move it across threads freely.
#[derive(Debug, Clone)]
pub struct ElfImage {
    pub header: FileHeader,
    pub program_headers: Vec<ProgramHeader>,
    pub sections: Vec<Section>,
    raw: Vec<u8>,
    /// Placement of each section at parse time (None for added sections);
    /// lets the serializer distinguish pre-existing overlaps from ones a
    /// mutation introduced.
    original_placement: Vec<Option<(u64, u64)>>,
    original_phdr_placement: (u64, u64),
    original_shdr_placement: (u64, u64),
    /// Reserved, zero-filled entries left after the last phdr-table move.
    pub(crate) phdr_slack: u16,
    /// File bytes reserved at a section's offset beyond sh_size, so the
    /// section can grow in place without another relocation.
    pub(crate) section_reserve: HashMap<usize, u64>,
    /// Import stubs created on this image: name -> callable vaddr.
    pub(crate) import_stubs: HashMap<String, u64>,
}

fn read_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}
fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}
fn read_u64(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes([
        b[off],
        b[off + 1],
        b[off + 2],
        b[off + 3],
        b[off + 4],
        b[off + 5],
        b[off + 6],
        b[off + 7],
    ])
}

fn checked_slice<'a>(bytes: &'a [u8], off: u64, len: u64, what: &str) -> Result<&'a [u8]> {
    let end = off
        .checked_add(len)
        .ok_or_else(|| ElfError::Malformed(format!("{what}: offset overflow")))?;
    if end > bytes.len() as u64 {
        return Err(ElfError::Malformed(format!(
            "{what}: range {off:#x}..{end:#x} exceeds file size {:#x}",
            bytes.len()
        )));
    }
    Ok(&bytes[off as usize..end as usize])
}

pub fn align_up(value: u64, align: u64) -> u64 {
    if align <= 1 {
        value
    } else {
        value.div_ceil(align) * align
    }
}

fn cstr_at(data: &[u8], offset: usize) -> Option<String> {
    if offset > data.len() {
        return None;
    }
    let rest = &data[offset..];
    let end = rest.iter().position(|&b| b == 0)?;
    Some(String::from_utf8_lossy(&rest[..end]).into_owned())
}

/// Parse an ELF64 little-endian executable or shared object.
pub fn parse(bytes: &[u8]) -> Result<ElfImage> {
    if bytes.len() < EHDR_SIZE as usize {
        return Err(ElfError::Malformed(format!(
            "file too short: {} bytes",
            bytes.len()
        )));
    }
    if bytes[0..4] != ELF_MAGIC {
        return Err(ElfError::NotElf);
    }
    if bytes[4] != ELFCLASS64 {
        return Err(ElfError::UnsupportedClass(format!(
            "ELF class {} (only ELFCLASS64 supported)",
            bytes[4]
        )));
    }
    if bytes[5] != ELFDATA2LSB {
        return Err(ElfError::UnsupportedClass(format!(
            "data encoding {} (only little-endian supported)",
            bytes[5]
        )));
    }

    let mut ident = [0u8; EI_NIDENT];
    ident.copy_from_slice(&bytes[0..EI_NIDENT]);
    let header = FileHeader {
        ident,
        e_type: read_u16(bytes, 16),
        e_machine: read_u16(bytes, 18),
        e_version: read_u32(bytes, 20),
        e_entry: read_u64(bytes, 24),
        e_phoff: read_u64(bytes, 32),
        e_shoff: read_u64(bytes, 40),
        e_flags: read_u32(bytes, 48),
        e_ehsize: read_u16(bytes, 52),
        e_phentsize: read_u16(bytes, 54),
        e_phnum: read_u16(bytes, 56),
        e_shentsize: read_u16(bytes, 58),
        e_shnum: read_u16(bytes, 60),
        e_shstrndx: read_u16(bytes, 62),
    };

    if header.e_type != ET_EXEC && header.e_type != ET_DYN {
        return Err(ElfError::Malformed(format!(
            "unsupported object type e_type={} (only ET_EXEC and ET_DYN)",
            header.e_type
        )));
    }
    if header.e_shnum == 0 && header.e_shoff != 0 {
        return Err(ElfError::Malformed(
            "extended section numbering (e_shnum == 0) unsupported".into(),
        ));
    }
    if header.e_phnum > 0 && header.e_phentsize != PHDR_SIZE as u16 {
        return Err(ElfError::Malformed(format!(
            "e_phentsize {} != {}",
            header.e_phentsize, PHDR_SIZE
        )));
    }
    if header.e_shnum > 0 && header.e_shentsize != SHDR_SIZE as u16 {
        return Err(ElfError::Malformed(format!(
            "e_shentsize {} != {}",
            header.e_shentsize, SHDR_SIZE
        )));
    }

    let mut program_headers = Vec::with_capacity(header.e_phnum as usize);
    let phdr_bytes = checked_slice(
        bytes,
        header.e_phoff,
        header.e_phnum as u64 * PHDR_SIZE,
        "program header table",
    )?;
    for i in 0..header.e_phnum as usize {
        let b = &phdr_bytes[i * PHDR_SIZE as usize..];
        program_headers.push(ProgramHeader {
            p_type: read_u32(b, 0),
            p_flags: read_u32(b, 4),
            p_offset: read_u64(b, 8),
            p_vaddr: read_u64(b, 16),
            p_paddr: read_u64(b, 24),
            p_filesz: read_u64(b, 32),
            p_memsz: read_u64(b, 40),
            p_align: read_u64(b, 48),
        });
    }
    for ph in &program_headers {
        if ph.p_type == PT_LOAD {
            checked_slice(bytes, ph.p_offset, ph.p_filesz, "PT_LOAD file range")?;
        }
    }

    let shdr_bytes = checked_slice(
        bytes,
        header.e_shoff,
        header.e_shnum as u64 * SHDR_SIZE,
        "section header table",
    )?;
    struct RawShdr {
        sh_name: u32,
        sh_type: u32,
        sh_flags: u64,
        sh_addr: u64,
        sh_offset: u64,
        sh_size: u64,
        sh_link: u32,
        sh_info: u32,
        sh_addralign: u64,
        sh_entsize: u64,
    }
    let mut raw_shdrs = Vec::with_capacity(header.e_shnum as usize);
    for i in 0..header.e_shnum as usize {
        let b = &shdr_bytes[i * SHDR_SIZE as usize..];
        raw_shdrs.push(RawShdr {
            sh_name: read_u32(b, 0),
            sh_type: read_u32(b, 4),
            sh_flags: read_u64(b, 8),
            sh_addr: read_u64(b, 16),
            sh_offset: read_u64(b, 24),
            sh_size: read_u64(b, 32),
            sh_link: read_u32(b, 40),
            sh_info: read_u32(b, 44),
            sh_addralign: read_u64(b, 48),
            sh_entsize: read_u64(b, 56),
        });
    }

    let shstrtab: Vec<u8> = if header.e_shnum > 0 {
        let idx = header.e_shstrndx as usize;
        if idx >= raw_shdrs.len() {
            return Err(ElfError::Malformed(format!(
                "e_shstrndx {idx} out of range"
            )));
        }
        let s = &raw_shdrs[idx];
        checked_slice(bytes, s.sh_offset, s.sh_size, ".shstrtab")?.to_vec()
    } else {
        Vec::new()
    };

    let mut sections = Vec::with_capacity(raw_shdrs.len());
    for (i, s) in raw_shdrs.iter().enumerate() {
        let name = cstr_at(&shstrtab, s.sh_name as usize).ok_or_else(|| {
            ElfError::Malformed(format!(
                "section {i}: name offset {:#x} does not resolve in .shstrtab",
                s.sh_name
            ))
        })?;
        let data = if s.sh_type == SHT_NOBITS || s.sh_type == SHT_NULL {
            Vec::new()
        } else {
            checked_slice(bytes, s.sh_offset, s.sh_size, &format!("section {name}"))?.to_vec()
        };
        sections.push(Section {
            name,
            sh_name: s.sh_name,
            sh_type: s.sh_type,
            sh_flags: s.sh_flags,
            sh_addr: s.sh_addr,
            sh_offset: s.sh_offset,
            sh_size: s.sh_size,
            sh_link: s.sh_link,
            sh_info: s.sh_info,
            sh_addralign: s.sh_addralign,
            sh_entsize: s.sh_entsize,
            data,
        });
    }

    let original_placement = sections.iter().map(|s| Some(s.file_range())).collect();
    let image = ElfImage {
        original_phdr_placement: (header.e_phoff, header.e_phnum as u64 * PHDR_SIZE),
        original_shdr_placement: (header.e_shoff, header.e_shnum as u64 * SHDR_SIZE),
        header,
        program_headers,
        sections,
        raw: bytes.to_vec(),
        original_placement,
        phdr_slack: 0,
        section_reserve: HashMap::new(),
        import_stubs: HashMap::new(),
    };
    Ok(image)
}

impl ElfImage {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        parse(bytes)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| ElfError::Malformed(format!("{}: {e}", path.as_ref().display())))?;
        parse(&bytes)
    }

    /// The size the serialized file will have.
    pub fn file_size(&self) -> u64 {
        let mut size = self.extent_without_shdr();
        size = size.max(self.header.e_shoff + self.sections.len() as u64 * SHDR_SIZE);
        size
    }

    /// File extent claimed by everything except the section header table.
    pub(crate) fn extent_without_shdr(&self) -> u64 {
        let mut size = self.raw.len() as u64;
        size = size.max(EHDR_SIZE);
        size = size.max(self.header.e_phoff + self.program_headers.len() as u64 * PHDR_SIZE);
        for (i, s) in self.sections.iter().enumerate() {
            if s.occupies_file_space() {
                size = size.max(s.sh_offset + s.sh_size);
            }
            if let Some(&reserve) = self.section_reserve.get(&i) {
                size = size.max(s.sh_offset + reserve);
            }
        }
        for ph in &self.program_headers {
            size = size.max(ph.p_offset + ph.p_filesz);
        }
        size
    }

    /// Serialize back to bytes. Unmutated images reproduce their input
    /// exactly; mutated images are checked for placement conflicts first.
    pub fn serialize(&self) -> Result<Vec<u8>> {
        self.check_layout()?;
        for (i, s) in self.sections.iter().enumerate() {
            if s.sh_type != SHT_NOBITS
                && s.sh_type != SHT_NULL
                && s.data.len() as u64 != s.sh_size
            {
                return Err(ElfError::LayoutConflict(format!(
                    "section {i} ({}): data length {} != sh_size {}",
                    s.name,
                    s.data.len(),
                    s.sh_size
                )));
            }
        }

        let total = self.file_size() as usize;
        let mut out = vec![0u8; total];
        let keep = self.raw.len().min(total);
        out[..keep].copy_from_slice(&self.raw[..keep]);

        // File header.
        out[0..EI_NIDENT].copy_from_slice(&self.header.ident);
        let h = &self.header;
        out[16..18].copy_from_slice(&h.e_type.to_le_bytes());
        out[18..20].copy_from_slice(&h.e_machine.to_le_bytes());
        out[20..24].copy_from_slice(&h.e_version.to_le_bytes());
        out[24..32].copy_from_slice(&h.e_entry.to_le_bytes());
        out[32..40].copy_from_slice(&h.e_phoff.to_le_bytes());
        out[40..48].copy_from_slice(&h.e_shoff.to_le_bytes());
        out[48..52].copy_from_slice(&h.e_flags.to_le_bytes());
        out[52..54].copy_from_slice(&h.e_ehsize.to_le_bytes());
        out[54..56].copy_from_slice(&h.e_phentsize.to_le_bytes());
        out[56..58].copy_from_slice(&(self.program_headers.len() as u16).to_le_bytes());
        out[58..60].copy_from_slice(&h.e_shentsize.to_le_bytes());
        out[60..62].copy_from_slice(&(self.sections.len() as u16).to_le_bytes());
        out[62..64].copy_from_slice(&h.e_shstrndx.to_le_bytes());

        // Program header table.
        let mut off = self.header.e_phoff as usize;
        for ph in &self.program_headers {
            out[off..off + 4].copy_from_slice(&ph.p_type.to_le_bytes());
            out[off + 4..off + 8].copy_from_slice(&ph.p_flags.to_le_bytes());
            out[off + 8..off + 16].copy_from_slice(&ph.p_offset.to_le_bytes());
            out[off + 16..off + 24].copy_from_slice(&ph.p_vaddr.to_le_bytes());
            out[off + 24..off + 32].copy_from_slice(&ph.p_paddr.to_le_bytes());
            out[off + 32..off + 40].copy_from_slice(&ph.p_filesz.to_le_bytes());
            out[off + 40..off + 48].copy_from_slice(&ph.p_memsz.to_le_bytes());
            out[off + 48..off + 56].copy_from_slice(&ph.p_align.to_le_bytes());
            off += PHDR_SIZE as usize;
        }

        // Section header table.
        let mut off = self.header.e_shoff as usize;
        for s in &self.sections {
            out[off..off + 4].copy_from_slice(&s.sh_name.to_le_bytes());
            out[off + 4..off + 8].copy_from_slice(&s.sh_type.to_le_bytes());
            out[off + 8..off + 16].copy_from_slice(&s.sh_flags.to_le_bytes());
            out[off + 16..off + 24].copy_from_slice(&s.sh_addr.to_le_bytes());
            out[off + 24..off + 32].copy_from_slice(&s.sh_offset.to_le_bytes());
            out[off + 32..off + 40].copy_from_slice(&s.sh_size.to_le_bytes());
            out[off + 40..off + 44].copy_from_slice(&s.sh_link.to_le_bytes());
            out[off + 44..off + 48].copy_from_slice(&s.sh_info.to_le_bytes());
            out[off + 48..off + 56].copy_from_slice(&s.sh_addralign.to_le_bytes());
            out[off + 56..off + 64].copy_from_slice(&s.sh_entsize.to_le_bytes());
            off += SHDR_SIZE as usize;
        }

        // Section contents.
        for s in &self.sections {
            if s.occupies_file_space() {
                let off = s.sh_offset as usize;
                out[off..off + s.data.len()].copy_from_slice(&s.data);
            }
        }

        Ok(out)
    }

    /// Reject overlapping file placements introduced by mutation.
    /// Placements identical to what was parsed never conflict, so unusual
    /// but pre-existing layouts round-trip untouched.
    fn check_layout(&self) -> Result<()> {
        #[derive(Clone)]
        struct Placement {
            range: (u64, u64),
            dirty: bool,
            what: String,
        }
        let mut placements = Vec::new();
        for (i, s) in self.sections.iter().enumerate() {
            if !s.occupies_file_space() {
                continue;
            }
            let mut range = s.file_range();
            if let Some(&reserve) = self.section_reserve.get(&i) {
                range.1 = range.1.max(s.sh_offset + reserve);
            }
            let dirty = self
                .original_placement
                .get(i)
                .copied()
                .flatten()
                .is_none_or(|orig| orig != range);
            placements.push(Placement {
                range,
                dirty,
                what: format!("section {i} ({})", s.name),
            });
        }
        let ph_range = (
            self.header.e_phoff,
            self.header.e_phoff + self.program_headers.len() as u64 * PHDR_SIZE,
        );
        placements.push(Placement {
            range: ph_range,
            dirty: ph_range != {
                let (o, l) = self.original_phdr_placement;
                (o, o + l)
            },
            what: "program header table".into(),
        });
        let sh_range = (
            self.header.e_shoff,
            self.header.e_shoff + self.sections.len() as u64 * SHDR_SIZE,
        );
        placements.push(Placement {
            range: sh_range,
            dirty: sh_range != {
                let (o, l) = self.original_shdr_placement;
                (o, o + l)
            },
            what: "section header table".into(),
        });

        for i in 0..placements.len() {
            for j in i + 1..placements.len() {
                let a = &placements[i];
                let b = &placements[j];
                if !(a.dirty || b.dirty) {
                    continue;
                }
                if a.range.0 < b.range.1 && b.range.0 < a.range.1 {
                    return Err(ElfError::LayoutConflict(format!(
                        "{} [{:#x}..{:#x}) overlaps {} [{:#x}..{:#x})",
                        a.what, a.range.0, a.range.1, b.what, b.range.0, b.range.1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn section_by_name(&self, name: &str) -> Option<(usize, &Section)> {
        self.sections
            .iter()
            .enumerate()
            .find(|(_, s)| s.name == name)
    }

    pub fn section_index_by_name(&self, name: &str) -> Option<usize> {
        self.sections.iter().position(|s| s.name == name)
    }

    /// Section whose file range contains `offset` (NOBITS excluded).
    pub fn section_at_offset(&self, offset: u64) -> Option<(usize, &Section)> {
        self.sections.iter().enumerate().find(|(_, s)| {
            s.occupies_file_space() && offset >= s.sh_offset && offset < s.sh_offset + s.sh_size
        })
    }

    pub fn section_at_vaddr(&self, vaddr: u64) -> Option<(usize, &Section)> {
        self.sections.iter().enumerate().find(|(_, s)| {
            s.is_alloc() && s.sh_size > 0 && vaddr >= s.sh_addr && vaddr < s.sh_addr + s.sh_size
        })
    }

    pub fn load_segments(&self) -> impl Iterator<Item = &ProgramHeader> {
        self.program_headers
            .iter()
            .filter(|ph| ph.p_type == PT_LOAD)
    }

    pub fn vaddr_is_mapped(&self, vaddr: u64) -> bool {
        self.load_segments().any(|ph| ph.contains_vaddr(vaddr))
    }

    /// Translate a virtual address to a file offset through PT_LOAD ranges.
    pub fn vaddr_to_offset(&self, vaddr: u64) -> Option<u64> {
        self.load_segments()
            .find(|ph| vaddr >= ph.p_vaddr && vaddr < ph.p_vaddr + ph.p_filesz)
            .map(|ph| vaddr - ph.p_vaddr + ph.p_offset)
    }

    pub fn offset_to_vaddr(&self, offset: u64) -> Option<u64> {
        self.load_segments()
            .find(|ph| offset >= ph.p_offset && offset < ph.p_offset + ph.p_filesz)
            .map(|ph| offset - ph.p_offset + ph.p_vaddr)
    }

    /// Read `len` bytes at a virtual address out of the section that maps it.
    pub fn read_vaddr(&self, vaddr: u64, len: u64) -> Option<&[u8]> {
        let (_, s) = self.section_at_vaddr(vaddr)?;
        if s.sh_type == SHT_NOBITS {
            return None;
        }
        let start = (vaddr - s.sh_addr) as usize;
        let end = start.checked_add(len as usize)?;
        s.data.get(start..end)
    }

    pub fn is_dynamic(&self) -> bool {
        self.program_headers
            .iter()
            .any(|ph| ph.p_type == PT_DYNAMIC)
    }

    pub fn dynamic_entries(&self) -> Vec<DynEntry> {
        let Some((_, sec)) = self
            .sections
            .iter()
            .enumerate()
            .find(|(_, s)| s.sh_type == SHT_DYNAMIC)
        else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for chunk in sec.data.chunks_exact(DYN_SIZE as usize) {
            let tag = i64::from_le_bytes(chunk[0..8].try_into().unwrap());
            let value = read_u64(chunk, 8);
            if tag == DT_NULL {
                break;
            }
            out.push(DynEntry { tag, value });
        }
        out
    }

    pub fn dynamic_value(&self, tag: i64) -> Option<u64> {
        self.dynamic_entries()
            .iter()
            .find(|e| e.tag == tag)
            .map(|e| e.value)
    }

    /// Parse a symbol table section (`.symtab` or `.dynsym`) into symbols.
    pub fn symbols(&self, kind: SymbolTableKind) -> Result<Vec<Symbol>> {
        let name = kind.section_name();
        let Some(sec) = self.sections.iter().find(|s| s.sh_type == kind.sh_type()) else {
            return Ok(Vec::new());
        };
        let strtab_idx = sec.sh_link as usize;
        let strtab = self.sections.get(strtab_idx).ok_or_else(|| {
            ElfError::Malformed(format!("{name}: sh_link {strtab_idx} out of range"))
        })?;
        let mut out = Vec::new();
        for (i, chunk) in sec.data.chunks_exact(SYM_SIZE as usize).enumerate() {
            let name_off = read_u32(chunk, 0) as usize;
            let info = chunk[4];
            let sym_name = cstr_at(&strtab.data, name_off).ok_or_else(|| {
                ElfError::Malformed(format!(
                    "{name}: symbol {i} name offset {name_off:#x} unresolved"
                ))
            })?;
            out.push(Symbol {
                name: sym_name,
                value: read_u64(chunk, 8),
                size: read_u64(chunk, 16),
                sym_type: SymbolType::from_raw(info & 0xf),
                binding: SymbolBinding::from_raw(info >> 4),
                visibility: chunk[5] & 0x3,
                section_index: read_u16(chunk, 6),
            });
        }
        Ok(out)
    }

    /// All relocations from `.rela.dyn` and `.rela.plt` style sections.
    pub fn relocations(&self) -> Vec<Rela> {
        let mut out = Vec::new();
        for sec in &self.sections {
            if sec.sh_type != SHT_RELA {
                continue;
            }
            for chunk in sec.data.chunks_exact(RELA_SIZE as usize) {
                let info = read_u64(chunk, 8);
                out.push(Rela {
                    offset: read_u64(chunk, 0),
                    sym_index: (info >> 32) as u32,
                    r_type: info as u32,
                    addend: i64::from_le_bytes(chunk[16..24].try_into().unwrap()),
                });
            }
        }
        out
    }

    /// Check every model invariant; an empty list means the image is clean.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let file_size = self.file_size();

        for (i, s) in self.sections.iter().enumerate() {
            if s.occupies_file_space() && s.sh_offset + s.sh_size > file_size {
                diags.push(Diagnostic {
                    invariant: "section-within-file",
                    location: format!(
                        "section {i} ({}) ends at {:#x}, file is {file_size:#x}",
                        s.name,
                        s.sh_offset + s.sh_size
                    ),
                });
            }
            if s.sh_type != SHT_NOBITS && s.sh_type != SHT_NULL && s.data.len() as u64 != s.sh_size
            {
                diags.push(Diagnostic {
                    invariant: "section-data-size",
                    location: format!("section {i} ({})", s.name),
                });
            }
        }

        // Every loadable section must sit inside exactly one PT_LOAD.
        for (i, s) in self.sections.iter().enumerate() {
            if !s.is_alloc() || s.sh_size == 0 {
                continue;
            }
            let mem_hits = self
                .load_segments()
                .filter(|ph| {
                    s.sh_addr >= ph.p_vaddr && s.sh_addr + s.sh_size <= ph.p_vaddr + ph.p_memsz
                })
                .count();
            if mem_hits != 1 {
                diags.push(Diagnostic {
                    invariant: "loadable-section-in-one-segment",
                    location: format!(
                        "section {i} ({}) memory range [{:#x}..{:#x}) hits {mem_hits} PT_LOAD segments",
                        s.name,
                        s.sh_addr,
                        s.sh_addr + s.sh_size
                    ),
                });
            }
            if s.sh_type != SHT_NOBITS {
                let file_hits = self
                    .load_segments()
                    .filter(|ph| {
                        s.sh_offset >= ph.p_offset
                            && s.sh_offset + s.sh_size <= ph.p_offset + ph.p_filesz
                    })
                    .count();
                if file_hits != 1 {
                    diags.push(Diagnostic {
                        invariant: "loadable-section-in-one-segment",
                        location: format!(
                            "section {i} ({}) file range [{:#x}..{:#x}) hits {file_hits} PT_LOAD segments",
                            s.name,
                            s.sh_offset,
                            s.sh_offset + s.sh_size
                        ),
                    });
                }
            }
        }

        // Section names must have resolved at parse/mutation time; verify the
        // recorded sh_name offsets still land inside .shstrtab.
        if let Some(shstrtab) = self.sections.get(self.header.e_shstrndx as usize) {
            for (i, s) in self.sections.iter().enumerate() {
                if cstr_at(&shstrtab.data, s.sh_name as usize).as_deref() != Some(&s.name) {
                    diags.push(Diagnostic {
                        invariant: "section-name-resolves",
                        location: format!("section {i} ({})", s.name),
                    });
                }
            }
        } else if !self.sections.is_empty() {
            diags.push(Diagnostic {
                invariant: "section-name-resolves",
                location: format!("e_shstrndx {} out of range", self.header.e_shstrndx),
            });
        }

        // Dynamic tables must resolve to mapped addresses.
        if self.is_dynamic() {
            if self.dynamic_entries().is_empty() {
                diags.push(Diagnostic {
                    invariant: "dynamic-tables-mapped",
                    location: "PT_DYNAMIC present but no .dynamic entries".into(),
                });
            } else {
                for tag in [DT_SYMTAB, DT_STRTAB] {
                    match self.dynamic_value(tag) {
                        Some(addr) if self.vaddr_is_mapped(addr) => {}
                        Some(addr) => diags.push(Diagnostic {
                            invariant: "dynamic-tables-mapped",
                            location: format!("tag {tag:#x} -> unmapped address {addr:#x}"),
                        }),
                        None => diags.push(Diagnostic {
                            invariant: "dynamic-tables-mapped",
                            location: format!("tag {tag:#x} missing"),
                        }),
                    }
                }
                let hash = self.dynamic_value(DT_HASH);
                let gnu_hash = self.dynamic_value(DT_GNU_HASH);
                let hash_ok = [hash, gnu_hash]
                    .iter()
                    .flatten()
                    .any(|&a| self.vaddr_is_mapped(a));
                if !hash_ok {
                    diags.push(Diagnostic {
                        invariant: "dynamic-tables-mapped",
                        location: "neither DT_HASH nor DT_GNU_HASH resolves to a mapped address"
                            .into(),
                    });
                }
                // Address-valued entries must stay inside mapped segments.
                for e in self.dynamic_entries() {
                    if matches!(
                        e.tag,
                        DT_HASH | DT_STRTAB | DT_SYMTAB | DT_RELA | DT_JMPREL | DT_VERSYM
                            | DT_GNU_HASH
                    ) && !self.vaddr_is_mapped(e.value)
                    {
                        diags.push(Diagnostic {
                            invariant: "dynamic-tables-mapped",
                            location: format!(
                                "DT tag {:#x} -> unmapped address {:#x}",
                                e.tag, e.value
                            ),
                        });
                    }
                }
            }
        }

        // Loader-side segment rules.
        let loads: Vec<&ProgramHeader> = self.load_segments().collect();
        for pair in loads.windows(2) {
            if pair[0].p_vaddr > pair[1].p_vaddr {
                diags.push(Diagnostic {
                    invariant: "load-segments-sorted",
                    location: format!(
                        "PT_LOAD at {:#x} precedes PT_LOAD at {:#x}",
                        pair[0].p_vaddr, pair[1].p_vaddr
                    ),
                });
            }
        }
        for ph in &loads {
            if ph.p_align > 1 && ph.p_vaddr % ph.p_align != ph.p_offset % ph.p_align {
                diags.push(Diagnostic {
                    invariant: "load-congruence",
                    location: format!(
                        "PT_LOAD vaddr {:#x} offset {:#x} align {:#x}",
                        ph.p_vaddr, ph.p_offset, ph.p_align
                    ),
                });
            }
        }

        // Symbol invariants for both tables.
        for kind in [SymbolTableKind::Symtab, SymbolTableKind::Dynsym] {
            match self.symbols(kind) {
                Ok(symbols) => {
                    for (i, sym) in symbols.iter().enumerate() {
                        if !sym.is_defined() || sym.section_index >= SHN_LORESERVE {
                            continue;
                        }
                        if matches!(sym.sym_type, SymbolType::Section | SymbolType::File) {
                            continue;
                        }
                        let Some(sec) = self.sections.get(sym.section_index as usize) else {
                            diags.push(Diagnostic {
                                invariant: "symbol-section-index",
                                location: format!(
                                    "{} symbol {i} ({}) section index {} out of range",
                                    kind.section_name(),
                                    sym.name,
                                    sym.section_index
                                ),
                            });
                            continue;
                        };
                        if sym.value < sec.sh_addr || sym.value > sec.sh_addr + sec.sh_size {
                            diags.push(Diagnostic {
                                invariant: "symbol-value-in-section",
                                location: format!(
                                    "{} symbol {i} ({}) value {:#x} outside {} [{:#x}..{:#x}]",
                                    kind.section_name(),
                                    sym.name,
                                    sym.value,
                                    sec.name,
                                    sec.sh_addr,
                                    sec.sh_addr + sec.sh_size
                                ),
                            });
                        }
                    }
                }
                Err(e) => diags.push(Diagnostic {
                    invariant: "symbol-name-resolves",
                    location: e.to_string(),
                }),
            }
        }

        diags
    }
}
