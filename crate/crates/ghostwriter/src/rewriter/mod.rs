//! Binary rewriting: realize an integer feature-vector delta as an edited
//! ELF image that still runs.
//!
//! `plan` maps each requested column change onto concrete edit actions and
//! predicts their feature effects; `apply` executes a plan against the
//! image, drawing all free choices (immediate values, displacement targets,
//! split offsets, replacement text, synthetic names) from a caller seed so
//! one plan yields diverse but behaviorally identical binaries;
//! `verify_side_effects` compares before/after vectors against the plan.
//!
//! Feature injection never touches reachable code: new instructions live in
//! unreachable-but-swept regions (a non-loaded section for linear features,
//! symbol-rooted functions in an appended executable section for code
//! features). Feature removal edits reachable code and therefore only uses
//! transformations with an explicit preservation argument: independent-pair
//! swaps, byte repaints in sections with no runtime or linking semantics,
//! and window relocation through trampolines that keep every original
//! target and register effect. Relocation alone never removes a linear
//! feature (the moved copy still decodes in the whole-file stream), so
//! linear removals go through transforms that change the instruction text
//! itself: call conversion, address splitting, the displacement sign flip
//! of a moved rip-relative operand, or repainting non-loaded bytes.
//!
//! Every action must move its planned column by exactly one count under the
//! module's own effect model; candidate edits that cannot (a relocation
//! whose trampoline would recreate the removed bigram, say) are rejected
//! during planning. Code-group consequences are tracked exactly per action.
//! Byte-level collateral in the linear group (section padding, relocated
//! window bytes, resynchronization sleds, grown symbol tables) is
//! intentionally left to the side-effect report rather than predicted.

mod asm;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Bound;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{
    code_sweep, decode_one, function_roots, AnnotationContext, Instruction, Operand, Reg,
};
use crate::elf::{
    ElfError, ElfImage, NewSection, Symbol, SymbolBinding, SymbolTableKind, SymbolType, SHF_ALLOC,
    SHF_EXECINSTR,
};
use crate::features::{
    code_text, cuts_bigram, extract_detailed, normalize_tokens, Extraction, FeatureKey,
    FeatureTable, FeatureVector, Group, Site,
};
use crate::vecmod::Delta;

use asm::AsmEnv;

#[derive(Debug)]
pub enum RewriteError {
    /// No edit primitive can realize the requested change on this column.
    NoStrategy { column: usize, reason: String },
    /// The plan and the image (or table) it is applied against disagree.
    PlanMismatch(String),
    Elf(ElfError),
}

impl fmt::Display for RewriteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewriteError::NoStrategy { column, reason } => {
                write!(f, "no strategy for column {column}: {reason}")
            }
            RewriteError::PlanMismatch(m) => write!(f, "plan mismatch: {m}"),
            RewriteError::Elf(e) => write!(f, "elf: {e}"),
        }
    }
}

impl std::error::Error for RewriteError {}

impl From<ElfError> for RewriteError {
    fn from(e: ElfError) -> Self {
        RewriteError::Elf(e)
    }
}

pub type Result<T> = std::result::Result<T, RewriteError>;

/// Knobs that change how a plan is realized, recorded in the plan so apply
/// and the audit log agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RewriteOptions {
    /// Draw the address-split offset from [1, 255] instead of walking up
    /// from 1. Either way the offset is chosen so the shifted address
    /// resolves to no name; a wider range only adds output diversity.
    pub diversity: bool,
    /// Save and restore the scratch register around converted indirect
    /// calls and split loads that need one. Off by default: the SysV ABI
    /// makes r10/r11 caller-saved, so no call site owns them. Turning this
    /// on shifts the stack by 8 across the rebuilt call, which breaks
    /// callees that rely on 16-byte stack alignment.
    pub scratch_save_restore: bool,
}

/// A contiguous run of whole instructions in an executable section,
/// replaced by a five-byte jump (plus nop fill) into a trampoline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub vaddr: u64,
    pub len: u32,
}

impl Window {
    pub fn end(&self) -> u64 {
        self.vaddr + self.len as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionKind {
    /// Append one feature's worth of machine code to a non-loaded section.
    InsertNonCodeBytes { text: String },
    /// Add an unreachable function whose body realizes one code feature.
    InsertFunction { text: String },
    /// Add an unreachable function that calls `callee`, importing it as a
    /// weak dynamic symbol if nothing in the image defines it.
    InsertCallTo { callee: String },
    /// Define symbol `name` (with backing storage if nothing provides it)
    /// and add an unreachable loader whose rip-relative lea resolves to it.
    InsertSymbolLoad { name: String, object: bool },
    /// Pool the string `data` and add an unreachable loader referencing it.
    InsertDataLoad { data: String },
    /// Repaint bytes in a section with no runtime or linking semantics.
    /// `text` is the linear feature the bytes must no longer decode to.
    Overwrite { offset: u64, len: u32, text: String },
    /// Exchange two adjacent instructions proven independent.
    Swap {
        first: u64,
        first_len: u8,
        second: u64,
        second_len: u8,
    },
    /// Relocate a window into a trampoline, optionally inserting a nop
    /// after the instruction at `nop_after` to break a bigram.
    InsertNop {
        window: Window,
        nop_after: Option<u64>,
    },
    /// Relocate a window holding one address-bearing instruction,
    /// rebuilding it as an offset load plus an add so the address
    /// reference disappears.
    SplitAddrLoad { window: Window },
    /// Relocate a direct call, dialing the same target through a scratch
    /// register.
    ConvToIndCall { window: Window, target: u64 },
}

impl ActionKind {
    pub fn primitive(&self) -> &'static str {
        match self {
            ActionKind::InsertNonCodeBytes { .. } => "insert_noncode_bytes",
            ActionKind::InsertFunction { .. } => "insert_function",
            ActionKind::InsertCallTo { .. } => "insert_call_to",
            ActionKind::InsertSymbolLoad { .. } => "insert_symbol_load",
            ActionKind::InsertDataLoad { .. } => "insert_data_load",
            ActionKind::Overwrite { .. } => "overwrite",
            ActionKind::Swap { .. } => "swap",
            ActionKind::InsertNop { .. } => "insert_nop",
            ActionKind::SplitAddrLoad { .. } => "split_addr_load",
            ActionKind::ConvToIndCall { .. } => "conv_to_ind_call",
        }
    }
}

/// One unit of change: every action moves its planned column by exactly one
/// count, with `expected` carrying the predicted effect on every tracked
/// column (the planned one included).
#[derive(Debug, Clone)]
pub struct Action {
    pub kind: ActionKind,
    pub column: usize,
    /// Canonical payload preview for injections, drawn with a fixed seed;
    /// `apply` re-materializes from the caller's seed. Empty for removals.
    pub payload: Vec<u8>,
    pub expected: BTreeMap<usize, i64>,
}

#[derive(Debug, Clone)]
pub struct ModificationPlan {
    pub actions: Vec<Action>,
    /// The delta the plan realizes: support columns and requested changes.
    pub planned: BTreeMap<usize, i64>,
    /// Sum of per-action predictions over all tracked columns.
    pub expected: BTreeMap<usize, i64>,
    pub options: RewriteOptions,
    pub table_version: String,
}

impl ModificationPlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Line-oriented audit log: one line per action with primitive, column,
    /// location and canonical payload, then the aggregate expectation.
    pub fn to_log(&self) -> String {
        let mut out = format!(
            "plan table={} actions={} diversity={} scratch_save_restore={}\n",
            self.table_version,
            self.actions.len(),
            self.options.diversity,
            self.options.scratch_save_restore,
        );
        for (i, a) in self.actions.iter().enumerate() {
            out.push_str(&format!(
                "action={i} primitive={} column={}",
                a.kind.primitive(),
                a.column
            ));
            match &a.kind {
                ActionKind::InsertNonCodeBytes { text } | ActionKind::InsertFunction { text } => {
                    out.push_str(&format!(" text={text:?}"));
                }
                ActionKind::InsertCallTo { callee } => {
                    out.push_str(&format!(" callee={callee}"));
                }
                ActionKind::InsertSymbolLoad { name, object } => {
                    out.push_str(&format!(" name={name} object={object}"));
                }
                ActionKind::InsertDataLoad { data } => {
                    out.push_str(&format!(" data={data:?}"));
                }
                ActionKind::Overwrite { offset, len, text } => {
                    out.push_str(&format!(" offset={offset:#x} len={len} text={text:?}"));
                }
                ActionKind::Swap {
                    first,
                    first_len,
                    second,
                    second_len,
                } => {
                    out.push_str(&format!(
                        " first={first:#x}+{first_len} second={second:#x}+{second_len}"
                    ));
                }
                ActionKind::InsertNop { window, nop_after } => {
                    out.push_str(&format!(" window={:#x}+{}", window.vaddr, window.len));
                    if let Some(at) = nop_after {
                        out.push_str(&format!(" nop_after={at:#x}"));
                    }
                }
                ActionKind::SplitAddrLoad { window } => {
                    out.push_str(&format!(" window={:#x}+{}", window.vaddr, window.len));
                }
                ActionKind::ConvToIndCall { window, target } => {
                    out.push_str(&format!(
                        " window={:#x}+{} target={target:#x}",
                        window.vaddr, window.len
                    ));
                }
            }
            if !a.payload.is_empty() {
                out.push_str(" payload=");
                for b in &a.payload {
                    out.push_str(&format!("{b:02x}"));
                }
            }
            out.push('\n');
        }
        out.push_str("expected");
        for (col, d) in &self.expected {
            out.push_str(&format!(" {col}:{d:+}"));
        }
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnChange {
    pub column: usize,
    pub before: u64,
    pub after: u64,
}

/// What actually happened to the vector, split against the plan.
#[derive(Debug, Clone, Default)]
pub struct SideEffectReport {
    /// Planned columns whose realized change differs from the request.
    pub off_target: Vec<ColumnChange>,
    /// Columns outside the plan's support that changed at all.
    pub unplanned: Vec<ColumnChange>,
}

impl SideEffectReport {
    pub fn is_clean(&self) -> bool {
        self.off_target.is_empty() && self.unplanned.is_empty()
    }
}

pub fn verify_side_effects(
    before: &FeatureVector,
    after: &FeatureVector,
    plan: &ModificationPlan,
) -> SideEffectReport {
    let mut report = SideEffectReport::default();
    for (col, (&b, &a)) in before.counts.iter().zip(&after.counts).enumerate() {
        let change = ColumnChange {
            column: col,
            before: b,
            after: a,
        };
        match plan.planned.get(&col) {
            Some(&want) => {
                if a as i64 - b as i64 != want {
                    report.off_target.push(change);
                }
            }
            None => {
                if a != b {
                    report.unplanned.push(change);
                }
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Shared layout facts.

/// Short runs of one-byte rets at the head of every appended section soak
/// up any instruction carried in from preceding file bytes, so the linear
/// pass decodes the payload on its intended boundaries.
const SLED_LEN: usize = 16;
/// Margin between the image's highest mapped address and the hole that
/// materialized rip displacements aim at. Appended sections must fit under
/// it.
const HIGH_HOLE_MARGIN: u64 = 0x20_0000;

fn asm_env(image: &ElfImage) -> AsmEnv {
    let mut low = u64::MAX;
    let mut high = 0u64;
    for s in &image.sections {
        if s.is_alloc() && s.sh_size > 0 {
            low = low.min(s.sh_addr);
            high = high.max(s.sh_addr + s.sh_size);
        }
    }
    AsmEnv {
        low_hole: low.saturating_sub(0x40).clamp(0x10, 0x7f),
        high_hole: high + HIGH_HOLE_MARGIN,
        annotation_safe: true,
    }
}

/// Independent stream per action and purpose: one caller seed diversifies
/// everything, while replaying any single action stays deterministic.
fn action_rng(seed: u64, idx: usize, salt: u64) -> ChaCha8Rng {
    let mut x = seed ^ salt ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

const SALT_CHUNK: u64 = 0x636e;
const SALT_NAME: u64 = 0x6e61;
const SALT_OVERWRITE: u64 = 0x6f77;
const SALT_LIN: u64 = 0x6c69;
/// Seed for the canonical payload previews recorded in the plan.
const PREVIEW_SEED: u64 = 0x70726576;

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Indirect-call register operands: identifier-shaped but not symbol names.
const QWORD_REGS: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12",
    "r13", "r14", "r15",
];

/// "call puts" style features inject as a real call; placeholder targets and
/// register operands assemble directly instead.
fn call_feature_callee(text: &str) -> Option<&str> {
    let rest = text.strip_prefix("call ")?;
    (is_identifier(rest) && rest != "hexadecimal" && !QWORD_REGS.contains(&rest)).then_some(rest)
}

fn text_mnemonic(text: &str) -> &str {
    text.split(' ').next().unwrap_or(text)
}

fn text_cuts(text: &str) -> bool {
    let mn = text_mnemonic(text);
    mn == "call" || mn == "ret" || mn == "jmp" || (mn.len() >= 2 && mn.starts_with('j'))
}

fn text_terminates(text: &str) -> bool {
    let mn = text_mnemonic(text);
    mn == "ret" || mn == "jmp"
}

/// The normalized text a code-stream instruction shows after moving to a
/// trampoline: targets are preserved, and every original target lies below
/// the relocation area, so positive rip displacements read back negative.
fn relocated_text(text: &str) -> String {
    text.replace("[rip+hexadecimal]", "[rip-hexadecimal]")
}

/// Feature texts of a straight-line body: unigrams, internal bigrams, plus
/// boundary bigrams with the given neighbors. Each body element carries its
/// control-transfer flag, which suppresses the bigram it would lead.
fn seq_features(
    prev: Option<(&str, bool)>,
    body: &[(String, bool)],
    next: Option<&str>,
) -> Vec<String> {
    let mut out = Vec::new();
    if body.is_empty() {
        return out;
    }
    if let Some((p, cuts)) = prev {
        if !cuts {
            out.push(format!("{p}; {}", body[0].0));
        }
    }
    for (i, (text, cuts)) in body.iter().enumerate() {
        out.push(text.clone());
        if !cuts {
            if let Some((nt, _)) = body.get(i + 1) {
                out.push(format!("{text}; {nt}"));
            } else if let Some(n) = next {
                out.push(format!("{text}; {n}"));
            }
        }
    }
    out
}

/// Instruction texts paired with their bigram-cut flags.
type BodyTexts = Vec<(String, bool)>;

/// Body text pairs (code view, linear view) for a feature-bearing function,
/// with the guard nop and closing ret applied. The guard keeps a leading
/// placeholder call from self-targeting the function symbol, which would
/// rename the feature.
fn function_bodies(text: &str) -> (BodyTexts, BodyTexts) {
    let mut code = Vec::new();
    let mut lin = Vec::new();
    let segments: Vec<&str> = text.split("; ").collect();
    if segments.first().is_some_and(|s| *s == "call hexadecimal") {
        code.push(("nop".to_string(), false));
        lin.push(("nop".to_string(), false));
    }
    for seg in &segments {
        if let Some(callee) = call_feature_callee(seg) {
            code.push((format!("call {callee}"), true));
            lin.push(("call hexadecimal".to_string(), true));
        } else {
            let cuts = text_cuts(seg);
            code.push((seg.to_string(), cuts));
            lin.push((seg.to_string(), cuts));
        }
    }
    if !text_terminates(segments.last().unwrap_or(&"")) {
        code.push(("ret".to_string(), true));
        lin.push(("ret".to_string(), true));
    }
    (code, lin)
}

// ---------------------------------------------------------------------------
// Swap independence.

/// ah/ch/dh/bh alias the low families; everything else is its own family.
fn reg_family(r: Reg) -> u8 {
    if r.high {
        r.index - 4
    } else {
        r.index
    }
}

struct RwProfile {
    reads: BTreeSet<u8>,
    writes: BTreeSet<u8>,
}

fn profile_write(p: &mut RwProfile, r: Reg) {
    p.writes.insert(reg_family(r));
    // Narrow writes preserve the rest of the family, which makes them reads
    // as well.
    if r.size < 4 {
        p.reads.insert(reg_family(r));
    }
}

/// Register families an instruction reads and writes, for the mnemonics the
/// swap checker models. None means the instruction is opaque, touches
/// memory, or moves with its position; those never swap.
fn rw_profile(insn: &Instruction) -> Option<RwProfile> {
    let mut p = RwProfile {
        reads: BTreeSet::new(),
        writes: BTreeSet::new(),
    };
    match insn.mnemonic {
        "nop" => Some(p),
        "mov" => {
            let [dst, src] = insn.operands.as_slice() else {
                return None;
            };
            match src {
                Operand::Reg(r) => {
                    p.reads.insert(reg_family(*r));
                }
                Operand::Imm { .. } => {}
                _ => return None,
            }
            match dst {
                Operand::Reg(r) => profile_write(&mut p, *r),
                _ => return None,
            }
            Some(p)
        }
        "lea" => {
            let [dst, Operand::Mem(m)] = insn.operands.as_slice() else {
                return None;
            };
            // lea only computes the address, so memory stays untouched, but
            // rip-relative forms change meaning when the bytes move.
            if m.rip_relative {
                return None;
            }
            if let Some(b) = m.base {
                p.reads.insert(reg_family(b));
            }
            if let Some(i) = m.index {
                p.reads.insert(reg_family(i));
            }
            match dst {
                Operand::Reg(r) => profile_write(&mut p, *r),
                _ => return None,
            }
            Some(p)
        }
        _ => None,
    }
}

/// Adjacent instructions may swap when both have modeled profiles and
/// neither writes a family the other touches. Deliberately narrower than
/// full dependence analysis; anything unproven stays put.
fn swap_eligible(a: &Instruction, b: &Instruction) -> bool {
    let (Some(pa), Some(pb)) = (rw_profile(a), rw_profile(b)) else {
        return false;
    };
    pa.writes.intersection(&pb.writes).next().is_none()
        && pa.writes.intersection(&pb.reads).next().is_none()
        && pb.writes.intersection(&pa.reads).next().is_none()
}

// ---------------------------------------------------------------------------
// Address-split shapes.

#[derive(Debug, Clone, Copy)]
enum SplitShape {
    /// lea r, [rip+d]
    LeaRip { dst: Reg, target: u64 },
    /// mov r, [rip+d]
    MovLoadRip { dst: Reg, target: u64 },
    /// mov r, imm where the immediate is an address
    MovImmAddr { dst: Reg, target: u64 },
}

impl SplitShape {
    fn of(insn: &Instruction) -> Option<SplitShape> {
        match (insn.mnemonic, insn.operands.as_slice()) {
            ("lea", [Operand::Reg(dst), Operand::Mem(m)]) if m.rip_relative => {
                if dst.size < 4 {
                    return None;
                }
                let target = (insn.vaddr + insn.length as u64).wrapping_add(m.disp as u64);
                Some(SplitShape::LeaRip { dst: *dst, target })
            }
            ("mov", [Operand::Reg(dst), Operand::Mem(m)]) if m.rip_relative => {
                if dst.high {
                    // An ah-family destination would need a REX-free scratch
                    // sequence; not worth modeling.
                    return None;
                }
                let target = (insn.vaddr + insn.length as u64).wrapping_add(m.disp as u64);
                Some(SplitShape::MovLoadRip { dst: *dst, target })
            }
            ("mov", [Operand::Reg(dst), Operand::Imm { value, .. }]) if !dst.high => {
                Some(SplitShape::MovImmAddr {
                    dst: *dst,
                    target: *value as u64,
                })
            }
            _ => None,
        }
    }

    fn target(&self) -> u64 {
        match self {
            SplitShape::LeaRip { target, .. }
            | SplitShape::MovLoadRip { target, .. }
            | SplitShape::MovImmAddr { target, .. } => *target,
        }
    }

    /// Register that carries the address while it is rebuilt, and whether
    /// it must be saved around the sequence under the save/restore option.
    /// A full-width load destination is its own scratch; narrower ones pick
    /// r11 (or r10 when the destination lives in that family) because a
    /// narrow destination write would clobber the rest of its family.
    fn scratch(&self, opts: &RewriteOptions) -> (Reg, bool) {
        match self {
            SplitShape::MovLoadRip { dst, .. } if dst.size < 8 => {
                let scratch = if reg_family(*dst) == 11 {
                    Reg::new(10, 8)
                } else {
                    Reg::new(11, 8)
                };
                (scratch, opts.scratch_save_restore)
            }
            SplitShape::MovLoadRip { dst, .. } => (Reg::new(dst.index, 8), false),
            SplitShape::LeaRip { dst, .. } | SplitShape::MovImmAddr { dst, .. } => (*dst, false),
        }
    }

    /// Trampoline body texts (before the jump back), in normalized form.
    fn body_texts(&self, opts: &RewriteOptions) -> Vec<(String, bool)> {
        let (scratch, save) = self.scratch(opts);
        let mut out = Vec::new();
        if save {
            out.push((format!("push {}", scratch.name()), false));
        }
        match self {
            SplitShape::LeaRip { dst, .. } => {
                out.push((format!("lea {},[rip-hexadecimal]", dst.name()), false));
                out.push((format!("add {},hexadecimal", dst.name()), false));
            }
            SplitShape::MovLoadRip { dst, .. } => {
                out.push((format!("lea {},[rip-hexadecimal]", scratch.name()), false));
                out.push((format!("add {},hexadecimal", scratch.name()), false));
                out.push((format!("mov {},{}", dst.name(), mem_text(scratch)), false));
            }
            SplitShape::MovImmAddr { dst, .. } => {
                out.push((format!("mov {},hexadecimal", dst.name()), false));
                out.push((format!("add {},hexadecimal", dst.name()), false));
            }
        }
        if save {
            out.push((format!("pop {}", scratch.name()), false));
        }
        out
    }
}

/// Display of a bare [base] memory operand after normalization, honoring
/// the rbp/r13 forced-displacement encoding.
fn mem_text(base: Reg) -> String {
    if base.index & 7 == 5 {
        format!("[{}+hexadecimal]", base.name())
    } else {
        format!("[{}]", base.name())
    }
}

// ---------------------------------------------------------------------------
// Planning.

struct Planner<'a> {
    table: &'a FeatureTable,
    image: &'a ElfImage,
    options: RewriteOptions,
    env: AsmEnv,
    annot_ctx: AnnotationContext,
    extraction: Extraction,
    code: Vec<Instruction>,
    code_texts: Vec<String>,
    by_vaddr: HashMap<u64, usize>,
    /// Every address some decoded branch or root points at.
    incoming: BTreeSet<u64>,
    /// Addresses targeted specifically by calls; a continuation symbol at
    /// such an address would rename the call's feature.
    call_targets: BTreeSet<u64>,
    dynamic: bool,
    actions: Vec<Action>,
    /// Accumulated prediction over all emitted actions.
    acc: BTreeMap<usize, i64>,
    /// Vaddr ranges whose bytes an emitted action rewrites.
    claimed: Vec<(u64, u64)>,
    /// Claims padded by one neighboring instruction on each side: the texts
    /// the action's bigram accounting read as context. Another edit may
    /// share that context but must not rewrite it.
    claimed_ctx: Vec<(u64, u64)>,
    claimed_file: Vec<(u64, u64)>,
    /// Next unexamined site index per column.
    cursors: HashMap<usize, usize>,
}

pub fn plan(
    delta: &Delta,
    table: &FeatureTable,
    image: &ElfImage,
    options: &RewriteOptions,
) -> Result<ModificationPlan> {
    for &col in delta.changes.keys() {
        if col >= table.entries.len() {
            return Err(RewriteError::PlanMismatch(format!(
                "delta column {col} outside table of {}",
                table.entries.len()
            )));
        }
    }
    let code = code_sweep(image);
    let code_texts: Vec<String> = code.iter().map(code_text).collect();
    let mut by_vaddr = HashMap::new();
    let mut incoming: BTreeSet<u64> = function_roots(image).into_iter().collect();
    let mut call_targets = BTreeSet::new();
    for (i, insn) in code.iter().enumerate() {
        by_vaddr.insert(insn.vaddr, i);
        for op in &insn.operands {
            if let Operand::Rel { target, .. } = op {
                incoming.insert(*target);
                if insn.mnemonic == "call" {
                    call_targets.insert(*target);
                }
            }
        }
    }
    let mut planner = Planner {
        table,
        image,
        options: *options,
        env: asm_env(image),
        annot_ctx: AnnotationContext::build(image),
        extraction: extract_detailed(image),
        code,
        code_texts,
        by_vaddr,
        incoming,
        call_targets,
        dynamic: image.sections.iter().any(|s| s.name == ".dynamic"),
        actions: Vec::new(),
        acc: BTreeMap::new(),
        claimed: Vec::new(),
        claimed_ctx: Vec::new(),
        claimed_file: Vec::new(),
        cursors: HashMap::new(),
    };
    planner.run(delta)?;
    let mut expected = BTreeMap::new();
    for a in &planner.actions {
        for (&col, &d) in &a.expected {
            *expected.entry(col).or_insert(0) += d;
        }
    }
    expected.retain(|_, d| *d != 0);
    Ok(ModificationPlan {
        actions: planner.actions,
        planned: delta.changes.clone(),
        expected,
        options: *options,
        table_version: table.version.clone(),
    })
}

impl<'a> Planner<'a> {
    fn run(&mut self, delta: &Delta) -> Result<()> {
        // Non-linear work first, looping because removals emit jumps and
        // injections emit loaders whose tracked side effects can satisfy or
        // re-open other planned columns. Claims and cursors only advance,
        // so the loop cannot revisit an edit and must settle or fail.
        let non_linear: Vec<(usize, i64)> = delta
            .changes
            .iter()
            .map(|(&c, &d)| (c, d))
            .filter(|&(c, _)| self.table.key_of(c).group != Group::LinearInstr)
            .collect();
        let linear: Vec<(usize, i64)> = delta
            .changes
            .iter()
            .map(|(&c, &d)| (c, d))
            .filter(|&(c, _)| self.table.key_of(c).group == Group::LinearInstr)
            .collect();
        let budget: usize = delta
            .changes
            .values()
            .map(|d| d.unsigned_abs() as usize)
            .sum();
        let mut rounds = 0;
        loop {
            rounds += 1;
            if rounds > budget + 4 {
                let col = non_linear
                    .iter()
                    .find(|&&(c, w)| self.remaining(c, w) != 0)
                    .map_or(0, |&(c, _)| c);
                return Err(RewriteError::NoStrategy {
                    column: col,
                    reason: "effect accounting did not converge".into(),
                });
            }
            let mut emitted = false;
            for &(col, want) in &non_linear {
                while self.remaining(col, want) < 0 {
                    self.emit_removal(col)?;
                    emitted = true;
                }
                while self.remaining(col, want) > 0 {
                    self.emit_injection(col)?;
                    emitted = true;
                }
            }
            if !emitted {
                break;
            }
        }
        for &(col, want) in &linear {
            while self.remaining(col, want) < 0 {
                self.emit_removal(col)?;
            }
        }
        for &(col, want) in &linear {
            while self.remaining(col, want) > 0 {
                self.emit_linear_injection(col)?;
            }
        }
        Ok(())
    }

    /// Positive when the column still needs injections, negative when it
    /// still needs removals.
    fn remaining(&self, col: usize, want: i64) -> i64 {
        want - self.acc.get(&col).copied().unwrap_or(0)
    }

    fn push_action(&mut self, action: Action) {
        for (&col, &d) in &action.expected {
            *self.acc.entry(col).or_insert(0) += d;
        }
        self.actions.push(action);
    }

    fn no_strategy(&self, col: usize, reason: impl Into<String>) -> RewriteError {
        RewriteError::NoStrategy {
            column: col,
            reason: reason.into(),
        }
    }

    fn code_col(&self, text: &str) -> Option<usize> {
        self.table.column_of(&FeatureKey::code(text))
    }

    fn lin_col(&self, text: &str) -> Option<usize> {
        self.table.column_of(&FeatureKey::linear(text))
    }

    fn annot_col(&self, text: &str) -> Option<usize> {
        self.table.column_of(&FeatureKey::annot(text))
    }

    fn add_effect(map: &mut BTreeMap<usize, i64>, col: Option<usize>, d: i64) {
        if let Some(col) = col {
            *map.entry(col).or_insert(0) += d;
        }
    }

    /// A defined symbol of the wanted flavor, reusable as a load target.
    fn defined_symbol_value(&self, name: &str, object: bool) -> Option<u64> {
        defined_symbol_value(self.image, name, object)
    }

    // -- Injections ---------------------------------------------------------

    fn emit_injection(&mut self, col: usize) -> Result<()> {
        let key = self.table.key_of(col).clone();
        match key.group {
            Group::CodeInstr => {
                if let Some(callee) = call_feature_callee(&key.text) {
                    let callee = callee.to_string();
                    self.emit_insert_call(col, &callee)
                } else {
                    self.emit_insert_function(col, &key.text)
                }
            }
            Group::CodeAnnot => {
                if let Some(name) = key.text.strip_prefix("obj.") {
                    let name = name.to_string();
                    self.emit_symbol_load(col, &name, true)
                } else if let Some(name) = key.text.strip_prefix("sym.") {
                    let name = name.to_string();
                    self.emit_symbol_load(col, &name, false)
                } else if is_identifier(&key.text) {
                    let callee = key.text.clone();
                    self.emit_insert_call(col, &callee)
                } else if string_poolable(&key.text) {
                    self.emit_data_load(col, &key.text)
                } else {
                    Err(self.no_strategy(
                        col,
                        format!("annotation {:?} is not reproducible", key.text),
                    ))
                }
            }
            Group::LinearInstr => self.emit_linear_injection(col),
        }
    }

    /// Prediction shared by every synthetic function: code features from
    /// `code_body`, linear features from `lin_body`, both swept in full.
    fn function_effects(
        &self,
        code_body: &[(String, bool)],
        lin_body: &[(String, bool)],
    ) -> BTreeMap<usize, i64> {
        let mut expected = BTreeMap::new();
        for text in seq_features(None, code_body, None) {
            Self::add_effect(&mut expected, self.code_col(&text), 1);
        }
        for text in seq_features(None, lin_body, None) {
            Self::add_effect(&mut expected, self.lin_col(&text), 1);
        }
        expected
    }

    fn emit_insert_function(&mut self, col: usize, text: &str) -> Result<()> {
        let (code_body, lin_body) = function_bodies(text);
        for (seg, _) in &code_body {
            if let Some(callee) = call_feature_callee(seg) {
                self.check_import(col, callee)?;
            }
        }
        let payload = self
            .preview_function(&code_body)
            .map_err(|e| self.no_strategy(col, e))?;
        let expected = self.function_effects(&code_body, &lin_body);
        self.push_action(Action {
            kind: ActionKind::InsertFunction {
                text: text.to_string(),
            },
            column: col,
            payload,
            expected,
        });
        Ok(())
    }

    fn emit_insert_call(&mut self, col: usize, callee: &str) -> Result<()> {
        self.check_import(col, callee)?;
        let code_body = vec![(format!("call {callee}"), true), ("ret".to_string(), true)];
        let lin_body = vec![
            ("call hexadecimal".to_string(), true),
            ("ret".to_string(), true),
        ];
        let mut expected = self.function_effects(&code_body, &lin_body);
        Self::add_effect(&mut expected, self.annot_col(callee), 1);
        self.push_action(Action {
            kind: ActionKind::InsertCallTo {
                callee: callee.to_string(),
            },
            column: col,
            payload: vec![0xe8, 0, 0, 0, 0, 0xc3],
            expected,
        });
        Ok(())
    }

    fn emit_symbol_load(&mut self, col: usize, name: &str, object: bool) -> Result<()> {
        if name.is_empty() || name.contains(['@', ' ', '\0']) {
            return Err(self.no_strategy(col, format!("symbol name {name:?} cannot be defined")));
        }
        let body = vec![
            ("lea rax,[rip-hexadecimal]".to_string(), false),
            ("ret".to_string(), true),
        ];
        let mut expected = self.function_effects(&body, &body);
        let prefixed = if object {
            format!("obj.{name}")
        } else {
            format!("sym.{name}")
        };
        Self::add_effect(&mut expected, self.annot_col(&prefixed), 1);
        if !object && self.defined_symbol_value(name, false).is_none() {
            // A fresh function symbol points at a one-byte ret stub that
            // the code sweep roots and the linear pass also sees.
            Self::add_effect(&mut expected, self.code_col("ret"), 1);
            Self::add_effect(&mut expected, self.lin_col("ret"), 1);
        }
        self.push_action(Action {
            kind: ActionKind::InsertSymbolLoad {
                name: name.to_string(),
                object,
            },
            column: col,
            payload: vec![0x48, 0x8d, 0x05, 0, 0, 0, 0, 0xc3],
            expected,
        });
        Ok(())
    }

    fn emit_data_load(&mut self, col: usize, data: &str) -> Result<()> {
        let body = vec![
            ("lea rax,[rip-hexadecimal]".to_string(), false),
            ("ret".to_string(), true),
        ];
        let mut expected = self.function_effects(&body, &body);
        Self::add_effect(&mut expected, self.annot_col(data), 1);
        self.push_action(Action {
            kind: ActionKind::InsertDataLoad {
                data: data.to_string(),
            },
            column: col,
            payload: vec![0x48, 0x8d, 0x05, 0, 0, 0, 0, 0xc3],
            expected,
        });
        Ok(())
    }

    fn emit_linear_injection(&mut self, col: usize) -> Result<()> {
        let key = self.table.key_of(col).clone();
        if key.group != Group::LinearInstr {
            return Err(self.no_strategy(col, "column is not a linear feature"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(PREVIEW_SEED);
        let payload = asm::assemble_feature(&key.text, 0x1000, &AsmEnv::linear(), &mut rng)
            .map_err(|e| self.no_strategy(col, e))?
            .concat();
        let mut body: Vec<(String, bool)> = key
            .text
            .split("; ")
            .map(|s| (s.to_string(), text_cuts(s)))
            .collect();
        // Every payload is followed by a one-byte ret separator.
        body.push(("ret".to_string(), true));
        let mut expected = BTreeMap::new();
        for text in seq_features(None, &body, None) {
            Self::add_effect(&mut expected, self.lin_col(&text), 1);
        }
        self.push_action(Action {
            kind: ActionKind::InsertNonCodeBytes { text: key.text },
            column: col,
            payload,
            expected,
        });
        Ok(())
    }

    fn check_import(&self, col: usize, name: &str) -> Result<()> {
        if self.dynamic || self.defined_symbol_value(name, false).is_some() {
            return Ok(());
        }
        Err(self.no_strategy(
            col,
            format!("static image defines no function named {name:?} to call"),
        ))
    }

    fn preview_function(
        &self,
        code_body: &[(String, bool)],
    ) -> std::result::Result<Vec<u8>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(PREVIEW_SEED);
        let mut out = Vec::new();
        let mut at = 0x1000u64;
        for (seg, _) in code_body {
            let bytes = if call_feature_callee(seg).is_some() {
                vec![0xe8, 0, 0, 0, 0]
            } else {
                asm::assemble_text(seg, at, &self.env, &mut rng)?
            };
            at += bytes.len() as u64;
            out.extend(bytes);
        }
        Ok(out)
    }

    // -- Removals -----------------------------------------------------------

    fn emit_removal(&mut self, col: usize) -> Result<()> {
        let key = self.table.key_of(col).clone();
        let sites = self
            .extraction
            .sites
            .get(&key)
            .cloned()
            .unwrap_or_default();
        loop {
            let cursor = self.cursors.entry(col).or_insert(0);
            let Some(site) = sites.get(*cursor).copied() else {
                return Err(self.no_strategy(
                    col,
                    format!("no removable occurrence of {:?} left", key.text),
                ));
            };
            *cursor += 1;
            let done = match key.group {
                Group::CodeAnnot => self.try_remove_annot(col, site)?,
                Group::CodeInstr => self.try_remove_code(col, &key.text, site)?,
                Group::LinearInstr => self.try_remove_linear(col, &key.text, site)?,
            };
            if done {
                return Ok(());
            }
        }
    }

    /// Whether rewriting [start, end) with the given context margins would
    /// invalidate an earlier action's bookkeeping. The window plus margins
    /// must avoid every claimed core; the window alone must also avoid the
    /// claimed context extents. Margins of two edits may meet: a shared
    /// neighbor is read by both and rewritten by neither.
    fn range_conflicts(&self, start: u64, end: u64, mlo: u64, mhi: u64) -> bool {
        let pad_lo = start - mlo;
        let pad_hi = end + mhi;
        self.claimed.iter().any(|&(s, e)| pad_lo < e && s < pad_hi)
            || self.claimed_ctx.iter().any(|&(s, e)| start < e && s < end)
    }

    fn prev_of(&self, idx: usize) -> Option<usize> {
        if idx == 0 {
            return None;
        }
        let p = &self.code[idx - 1];
        (p.vaddr + p.length as u64 == self.code[idx].vaddr).then_some(idx - 1)
    }

    fn next_of(&self, idx: usize) -> Option<usize> {
        let this = &self.code[idx];
        let n = self.code.get(idx + 1)?;
        (this.vaddr + this.length as u64 == n.vaddr).then_some(idx + 1)
    }

    fn is_relocatable(&self, idx: usize) -> bool {
        let insn = &self.code[idx];
        if insn.mnemonic == "db" {
            return false;
        }
        !insn
            .operands
            .iter()
            .any(|o| matches!(o, Operand::Rel { enc_width: 1, .. }))
    }

    /// Grow [first..=last] to at least five bytes of whole, relocatable
    /// instructions within [lo, hi], preferring forward growth. None when
    /// the neighborhood cannot host the jump.
    fn widen_window(
        &self,
        mut first: usize,
        mut last: usize,
        lo: usize,
        hi: usize,
    ) -> Option<(usize, usize)> {
        let span = |f: usize, l: usize| {
            self.code[l].vaddr + self.code[l].length as u64 - self.code[f].vaddr
        };
        for i in first..=last {
            if !self.is_relocatable(i) {
                return None;
            }
        }
        while span(first, last) < 5 {
            let forward = match self.next_of(last) {
                Some(n) if n <= hi && !self.code[last].is_terminator() => {
                    self.is_relocatable(n).then_some(n)
                }
                _ => None,
            };
            if let Some(n) = forward {
                last = n;
                continue;
            }
            match self.prev_of(first) {
                Some(p) if p >= lo && self.is_relocatable(p) && !self.code[p].is_terminator() => {
                    first = p;
                }
                _ => return None,
            }
        }
        Some((first, last))
    }

    /// Boundary margins: the length of the adjacent instruction on each
    /// side, so claims include the bigram context they consumed.
    fn margins(&self, first: usize, last: usize) -> (u64, u64) {
        let lo = self
            .prev_of(first)
            .map(|p| self.code[p].length as u64)
            .unwrap_or(0);
        let hi = self
            .next_of(last)
            .map(|n| self.code[n].length as u64)
            .unwrap_or(0);
        (lo, hi)
    }

    /// Validate a widened range against control flow and prior claims.
    /// Jumps at the window start stay correct (they hit the trampoline
    /// jump); anything targeting the interior cannot move.
    fn build_window(&self, first: usize, last: usize) -> Option<Window> {
        let start = self.code[first].vaddr;
        let end = self.code[last].vaddr + self.code[last].length as u64;
        if self
            .incoming
            .range((Bound::Excluded(start), Bound::Excluded(end)))
            .next()
            .is_some()
        {
            return None;
        }
        // A continuation symbol lands at the end; a call targeting that
        // address would pick up the new name.
        if !self.code[last].is_terminator() && self.call_targets.contains(&end) {
            return None;
        }
        let (mlo, mhi) = self.margins(first, last);
        if self.range_conflicts(start, end, mlo, mhi) {
            return None;
        }
        Some(Window {
            vaddr: start,
            len: (end - start) as u32,
        })
    }

    fn claim_range(&mut self, first: usize, last: usize) {
        let (mlo, mhi) = self.margins(first, last);
        let start = self.code[first].vaddr;
        let end = self.code[last].vaddr + self.code[last].length as u64;
        self.claimed.push((start, end));
        self.claimed_ctx.push((start - mlo, end + mhi));
    }

    /// Exact code-feature bookkeeping for replacing stream range
    /// [first..=last] with `window_new` in place and `tramp` out of line.
    fn window_effects(
        &self,
        first: usize,
        last: usize,
        window_new: &[(String, bool)],
        tramp: &[(String, bool)],
    ) -> BTreeMap<usize, i64> {
        let prev = self
            .prev_of(first)
            .map(|p| (self.code_texts[p].as_str(), cuts_bigram(&self.code[p])));
        let next = self.next_of(last).map(|n| self.code_texts[n].as_str());
        let original: Vec<(String, bool)> = (first..=last)
            .map(|i| (self.code_texts[i].clone(), cuts_bigram(&self.code[i])))
            .collect();
        let mut expected = BTreeMap::new();
        for text in seq_features(prev, &original, next) {
            Self::add_effect(&mut expected, self.code_col(&text), -1);
        }
        for text in seq_features(prev, window_new, next) {
            Self::add_effect(&mut expected, self.code_col(&text), 1);
        }
        for text in seq_features(None, tramp, None) {
            Self::add_effect(&mut expected, self.code_col(&text), 1);
        }
        expected
    }

    /// Relocated original texts for stream range [first..=last] with an
    /// optional nop inserted after `nop_after`, plus the jump back when the
    /// window does not end in a terminator. `linear_view` renders the texts
    /// as the linear pass would see them.
    fn tramp_texts(
        &self,
        first: usize,
        last: usize,
        nop_after: Option<u64>,
        linear_view: bool,
    ) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        for i in first..=last {
            let text = if linear_view {
                relocated_text(&self.lin_view_in_place(i))
            } else {
                relocated_text(&self.code_texts[i])
            };
            out.push((text, cuts_bigram(&self.code[i])));
            if nop_after == Some(self.code[i].vaddr) {
                out.push(("nop".to_string(), false));
            }
        }
        if !self.code[last].is_terminator() {
            out.push(("jmp hexadecimal".to_string(), true));
        }
        out
    }

    /// In-place linear text of a code instruction: no annotations, so named
    /// call targets fall back to the placeholder.
    fn lin_view_in_place(&self, idx: usize) -> String {
        let insn = &self.code[idx];
        if insn.mnemonic == "call" && matches!(insn.operands.first(), Some(Operand::Rel { .. })) {
            return "call hexadecimal".to_string();
        }
        self.code_texts[idx].clone()
    }

    fn window_jmp() -> Vec<(String, bool)> {
        vec![("jmp hexadecimal".to_string(), true)]
    }

    /// The annotation names this instruction contributes, as feature texts.
    fn annot_names(&self, idx: usize) -> Vec<String> {
        self.code[idx]
            .annotations
            .iter()
            .map(|a| a.name.clone())
            .collect()
    }

    fn try_remove_annot(&mut self, col: usize, site: Site) -> Result<bool> {
        let Some(&idx) = self.by_vaddr.get(&site.vaddr) else {
            return Ok(false);
        };
        if self.code[idx].mnemonic == "call" {
            return self.try_conv_ind_call(col, idx, &[]);
        }
        self.try_split_addr_load(col, idx, &[])
    }

    /// Relocate the call at `idx` into a register-indirect trampoline. The
    /// callee annotation disappears; a symbol at the target may surface as
    /// an immediate annotation on the trampoline's address move.
    fn try_conv_ind_call(
        &mut self,
        col: usize,
        idx: usize,
        extra: &[(usize, i64)],
    ) -> Result<bool> {
        let insn = &self.code[idx];
        if insn.mnemonic != "call" || insn.length != 5 {
            return Ok(false);
        }
        let Some(Operand::Rel {
            target,
            enc_width: 4,
        }) = insn.operands.first().copied()
        else {
            return Ok(false);
        };
        let Some(w) = self.build_window(idx, idx) else {
            return Ok(false);
        };
        let mut tramp = Vec::new();
        if self.options.scratch_save_restore {
            tramp.push(("push r11".to_string(), false));
        }
        tramp.push(("lea r11,[rip-hexadecimal]".to_string(), false));
        tramp.push(("call r11".to_string(), true));
        if self.options.scratch_save_restore {
            tramp.push(("pop r11".to_string(), false));
        }
        tramp.push(("jmp hexadecimal".to_string(), true));
        let mut expected = self.window_effects(idx, idx, &Self::window_jmp(), &tramp);
        for name in self.annot_names(idx) {
            Self::add_effect(&mut expected, self.annot_col(&name), -1);
        }
        if self.image.section_at_vaddr(target).is_some() {
            if let Some((_, name)) = self.annot_ctx.data_ref_name(self.image, target) {
                Self::add_effect(&mut expected, self.annot_col(&name), 1);
            }
        }
        for &(c, d) in extra {
            *expected.entry(c).or_insert(0) += d;
        }
        expected.retain(|_, d| *d != 0);
        if expected.get(&col) != Some(&-1) {
            return Ok(false);
        }
        self.claim_range(idx, idx);
        self.push_action(Action {
            kind: ActionKind::ConvToIndCall { window: w, target },
            column: col,
            payload: Vec::new(),
            expected,
        });
        Ok(true)
    }

    fn try_split_addr_load(
        &mut self,
        col: usize,
        idx: usize,
        extra: &[(usize, i64)],
    ) -> Result<bool> {
        if (self.code[idx].length as u64) < 5 {
            return Ok(false);
        }
        let Some(shape) = SplitShape::of(&self.code[idx]) else {
            return Ok(false);
        };
        let Some(w) = self.build_window(idx, idx) else {
            return Ok(false);
        };
        let mut tramp = shape.body_texts(&self.options);
        tramp.push(("jmp hexadecimal".to_string(), true));
        let mut expected = self.window_effects(idx, idx, &Self::window_jmp(), &tramp);
        for name in self.annot_names(idx) {
            Self::add_effect(&mut expected, self.annot_col(&name), -1);
        }
        for &(c, d) in extra {
            *expected.entry(c).or_insert(0) += d;
        }
        expected.retain(|_, d| *d != 0);
        if expected.get(&col) != Some(&-1) {
            return Ok(false);
        }
        self.claim_range(idx, idx);
        self.push_action(Action {
            kind: ActionKind::SplitAddrLoad { window: w },
            column: col,
            payload: Vec::new(),
            expected,
        });
        Ok(true)
    }

    fn try_remove_code(&mut self, col: usize, text: &str, site: Site) -> Result<bool> {
        let Some(&idx) = self.by_vaddr.get(&site.vaddr) else {
            return Ok(false);
        };
        if let Some((a, b)) = text.split_once("; ") {
            let Some(nidx) = self.next_of(idx) else {
                return Ok(false);
            };
            if self.code_texts[idx] != a || self.code_texts[nidx] != b {
                return Ok(false);
            }
            self.try_remove_pair(col, idx, nidx, &[], None)
        } else if text.starts_with("call ") {
            self.try_conv_ind_call(col, idx, &[])
        } else {
            Err(self.no_strategy(
                col,
                format!("removing an occurrence of {text:?} would change behavior"),
            ))
        }
    }

    /// Break the bigram (idx, nidx): swap when provably independent, then a
    /// nop between the two, then relocating one side alone. Each candidate
    /// is kept only if the planned column moves by exactly -1.
    fn try_remove_pair(
        &mut self,
        col: usize,
        idx: usize,
        nidx: usize,
        extra: &[(usize, i64)],
        lin_guard: Option<&str>,
    ) -> Result<bool> {
        if self.try_swap(col, idx, nidx, extra)? {
            return Ok(true);
        }
        let nop_after = Some(self.code[idx].vaddr);
        if self.try_relocation(col, idx, nidx, 0, usize::MAX, nop_after, extra, lin_guard)? {
            return Ok(true);
        }
        // Splitting the pair across the window edge also breaks it: the
        // trailing side stays put while the leading side moves.
        if self.try_relocation(col, idx, idx, 0, idx, None, extra, lin_guard)? {
            return Ok(true);
        }
        self.try_relocation(col, nidx, nidx, nidx, usize::MAX, None, extra, lin_guard)
    }

    fn try_swap(
        &mut self,
        col: usize,
        idx: usize,
        nidx: usize,
        extra: &[(usize, i64)],
    ) -> Result<bool> {
        let (a_vaddr, a_len) = (self.code[idx].vaddr, self.code[idx].length);
        let (b_vaddr, b_len) = (self.code[nidx].vaddr, self.code[nidx].length);
        if !swap_eligible(&self.code[idx], &self.code[nidx])
            || self.code_texts[idx] == self.code_texts[nidx]
        {
            return Ok(false);
        }
        let start = a_vaddr;
        let end = b_vaddr + b_len as u64;
        let (mlo, mhi) = self.margins(idx, nidx);
        if self.range_conflicts(start, end, mlo, mhi)
            || self
                .incoming
                .range((Bound::Excluded(start), Bound::Excluded(end)))
                .next()
                .is_some()
        {
            return Ok(false);
        }
        let swapped = vec![
            (self.code_texts[nidx].clone(), cuts_bigram(&self.code[nidx])),
            (self.code_texts[idx].clone(), cuts_bigram(&self.code[idx])),
        ];
        let mut expected = self.window_effects(idx, nidx, &swapped, &[]);
        self.track_linear_swap(&mut expected, idx, nidx);
        for &(c, d) in extra {
            *expected.entry(c).or_insert(0) += d;
        }
        expected.retain(|_, d| *d != 0);
        if expected.get(&col) != Some(&-1) {
            return Ok(false);
        }
        self.claim_range(idx, nidx);
        self.push_action(Action {
            kind: ActionKind::Swap {
                first: a_vaddr,
                first_len: a_len,
                second: b_vaddr,
                second_len: b_len,
            },
            column: col,
            payload: Vec::new(),
            expected,
        });
        Ok(true)
    }

    /// Relocate [first..=last] (after widening within [lo, hi]) into a
    /// trampoline. `extra` folds in effects the caller knows about (the
    /// planned linear column); `lin_guard` rejects trampolines whose linear
    /// view would recreate that feature out of line.
    #[allow(clippy::too_many_arguments)]
    fn try_relocation(
        &mut self,
        col: usize,
        first: usize,
        last: usize,
        lo: usize,
        hi: usize,
        nop_after: Option<u64>,
        extra: &[(usize, i64)],
        lin_guard: Option<&str>,
    ) -> Result<bool> {
        let Some((first, last)) = self.widen_window(first, last, lo, hi) else {
            return Ok(false);
        };
        let Some(w) = self.build_window(first, last) else {
            return Ok(false);
        };
        let tramp = self.tramp_texts(first, last, nop_after, false);
        if let Some(guard) = lin_guard {
            // The nop fill behind the window jump and the trampoline's own
            // linear image are untracked; reject any candidate that could
            // reintroduce the removed linear feature there.
            if guard
                .split("; ")
                .any(|c| c == "nop" || c == "jmp hexadecimal")
            {
                return Ok(false);
            }
            let lin_tramp = self.tramp_texts(first, last, nop_after, true);
            if seq_features(None, &lin_tramp, None).iter().any(|t| t == guard) {
                return Ok(false);
            }
        }
        let mut expected = self.window_effects(first, last, &Self::window_jmp(), &tramp);
        for &(c, d) in extra {
            *expected.entry(c).or_insert(0) += d;
        }
        expected.retain(|_, d| *d != 0);
        if expected.get(&col) != Some(&-1) {
            return Ok(false);
        }
        self.claim_range(first, last);
        self.push_action(Action {
            kind: ActionKind::InsertNop {
                window: w,
                nop_after,
            },
            column: col,
            payload: Vec::new(),
            expected,
        });
        Ok(true)
    }

    /// The linear stream sees a swap as the same bigram flip when its
    /// decode is aligned with the code stream at the site.
    fn track_linear_swap(&self, expected: &mut BTreeMap<usize, i64>, idx: usize, nidx: usize) {
        let (ta, tb) = (&self.code_texts[idx], &self.code_texts[nidx]);
        let old = FeatureKey::linear(format!("{ta}; {tb}"));
        let aligned = self.extraction.sites.get(&old).is_some_and(|sites| {
            sites
                .iter()
                .any(|s| s.file_offset == self.code[idx].file_offset)
        });
        if aligned {
            Self::add_effect(expected, self.table.column_of(&old), -1);
            Self::add_effect(expected, self.lin_col(&format!("{tb}; {ta}")), 1);
        }
    }

    fn try_remove_linear(&mut self, col: usize, text: &str, site: Site) -> Result<bool> {
        let Some((sec_idx, sec)) = self.image.section_at_offset(site.file_offset) else {
            return Ok(false);
        };
        if sec.is_exec() {
            let vaddr = sec.sh_addr + (site.file_offset - sec.sh_offset);
            return self.try_remove_linear_in_code(col, text, site, vaddr);
        }
        if sec.is_alloc() {
            // Loaded data carries program semantics; repainting it is not
            // behavior-preserving.
            return Ok(false);
        }
        if !overwritable_section(&sec.name) {
            return Ok(false);
        }
        let start = site.file_offset;
        let end = start + site.length as u64;
        if end > sec.sh_offset + sec.sh_size {
            // The decode straddles the section boundary; the tail bytes
            // belong to a neighbor this strategy has no right to repaint.
            return Ok(false);
        }
        if self.claimed_file.iter().any(|&(s, e)| start < e && s < end) {
            return Ok(false);
        }
        if sec.name == ".strtab" && self.strtab_range_is_load_bearing(sec_idx, start, end) {
            return Ok(false);
        }
        self.claimed_file.push((start, end));
        self.push_action(Action {
            kind: ActionKind::Overwrite {
                offset: start,
                len: site.length,
                text: text.to_string(),
            },
            column: col,
            payload: Vec::new(),
            expected: BTreeMap::from([(col, -1)]),
        });
        Ok(true)
    }

    /// A .strtab range may be repainted only when no defined code or data
    /// symbol name overlaps its enclosing strings; file and section names
    /// carry no meaning for the sweeps.
    fn strtab_range_is_load_bearing(&self, sec_idx: usize, start: u64, end: u64) -> bool {
        let sec = &self.image.sections[sec_idx];
        let data = &sec.data;
        let rel_start = (start - sec.sh_offset) as usize;
        let rel_end = ((end - sec.sh_offset) as usize).min(data.len());
        let str_start = data[..rel_start]
            .iter()
            .rposition(|&b| b == 0)
            .map_or(0, |p| p + 1);
        let str_end = data[rel_end..]
            .iter()
            .position(|&b| b == 0)
            .map_or(data.len(), |p| rel_end + p);
        let touched = String::from_utf8_lossy(&data[str_start..str_end]).into_owned();
        for kind in [SymbolTableKind::Symtab, SymbolTableKind::Dynsym] {
            for sym in self.image.symbols(kind).unwrap_or_default() {
                if !sym.name.is_empty()
                    && matches!(sym.sym_type, SymbolType::Func | SymbolType::Object)
                    && touched.contains(sym.name.as_str())
                {
                    return true;
                }
            }
        }
        false
    }

    /// Linear features inside executable bytes: relocation alone cannot
    /// remove them (the trampoline re-enters the same stream), so only
    /// text-changing transforms qualify: call conversion, address splits,
    /// the rip sign flip of a moved instruction, or a bigram break.
    fn try_remove_linear_in_code(
        &mut self,
        col: usize,
        text: &str,
        site: Site,
        vaddr: u64,
    ) -> Result<bool> {
        let Some(&idx) = self.by_vaddr.get(&vaddr) else {
            return Ok(false);
        };
        let extra = [(col, -1)];
        if let Some((a, b)) = text.split_once("; ") {
            let Some(nidx) = self.next_of(idx) else {
                return Ok(false);
            };
            if self.code[idx].length as u32 + self.code[nidx].length as u32 != site.length {
                return Ok(false);
            }
            if self.lin_view_in_place(idx) != a || self.lin_view_in_place(nidx) != b {
                return Ok(false);
            }
            // A swap's linear flip is tracked through the site itself, so
            // no manual adjustment applies there.
            if self.try_swap(col, idx, nidx, &[])? {
                return Ok(true);
            }
            let nop_after = Some(self.code[idx].vaddr);
            if self.try_relocation(col, idx, nidx, 0, usize::MAX, nop_after, &extra, Some(text))? {
                return Ok(true);
            }
            if self.try_relocation(col, idx, idx, 0, idx, None, &extra, Some(text))? {
                return Ok(true);
            }
            self.try_relocation(col, nidx, nidx, nidx, usize::MAX, None, &extra, Some(text))
        } else {
            if self.code[idx].length as u32 != site.length || self.lin_view_in_place(idx) != text {
                return Ok(false);
            }
            if self.code[idx].mnemonic == "call" {
                return self.try_conv_ind_call(col, idx, &extra);
            }
            if self.try_split_for_linear(col, idx, text, &extra)? {
                return Ok(true);
            }
            if text.contains("[rip+hexadecimal]") {
                // Relocation flips the displacement sign, changing the text.
                return self.try_relocation(col, idx, idx, 0, usize::MAX, None, &extra, Some(text));
            }
            Ok(false)
        }
    }

    fn try_split_for_linear(
        &mut self,
        col: usize,
        idx: usize,
        text: &str,
        extra: &[(usize, i64)],
    ) -> Result<bool> {
        let Some(shape) = SplitShape::of(&self.code[idx]) else {
            return Ok(false);
        };
        // The split must not recreate the removed text out of line.
        let body = shape.body_texts(&self.options);
        if body.iter().any(|(t, _)| t == text) {
            return Ok(false);
        }
        self.try_split_addr_load(col, idx, extra)
    }
}

fn overwritable_section(name: &str) -> bool {
    name == ".comment" || name == ".strtab" || name.starts_with(".debug")
}

fn string_poolable(s: &str) -> bool {
    (4..=64).contains(&s.len()) && s.bytes().all(|b| (0x20..0x7f).contains(&b))
}

fn defined_symbol_value(image: &ElfImage, name: &str, object: bool) -> Option<u64> {
    for kind in [SymbolTableKind::Symtab, SymbolTableKind::Dynsym] {
        for sym in image.symbols(kind).unwrap_or_default() {
            let type_ok = if object {
                sym.sym_type == SymbolType::Object
            } else {
                sym.sym_type == SymbolType::Func
            };
            if type_ok && sym.is_defined() && sym.name == name {
                return Some(sym.value);
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Application.

/// Chunks of the appended executable section, in layout order.
enum TextChunk {
    /// One-byte ret stub carrying a requested function symbol.
    FuncStub { name: String },
    /// Synthetic function or trampoline for the action at this index.
    Action(usize),
}

pub fn apply(image: &ElfImage, plan: &ModificationPlan, seed: u64) -> Result<ElfImage> {
    let mut out = image.clone();
    if plan.actions.is_empty() {
        return Ok(out);
    }
    let env = asm_env(image);
    let annot_ctx = AnnotationContext::build(image);

    // Imports first: they append their own sections below everything the
    // layout passes place later.
    let mut imports: BTreeMap<String, u64> = BTreeMap::new();
    for action in &plan.actions {
        for callee in action_callees(action) {
            if let std::collections::btree_map::Entry::Vacant(e) = imports.entry(callee) {
                let stub = out.import_callable(e.key())?;
                e.insert(stub);
            }
        }
    }

    // Data pool: object cells and strings, deduplicated, ret-separated.
    let mut data_items: Vec<(String, Vec<u8>)> = Vec::new();
    let mut seen = BTreeSet::new();
    for action in &plan.actions {
        match &action.kind {
            ActionKind::InsertSymbolLoad { name, object: true } => {
                if defined_symbol_value(image, name, true).is_none()
                    && seen.insert(format!("o\0{name}"))
                {
                    data_items.push((format!("o\0{name}"), vec![0u8; 8]));
                }
            }
            ActionKind::InsertDataLoad { data } if seen.insert(format!("s\0{data}")) => {
                let mut bytes = data.as_bytes().to_vec();
                bytes.push(0);
                data_items.push((format!("s\0{data}"), bytes));
            }
            _ => {}
        }
    }
    let mut data_addrs: BTreeMap<String, u64> = BTreeMap::new();
    let mut data_sec_idx = None;
    if !data_items.is_empty() {
        let mut blob = vec![asm::RET; SLED_LEN];
        let mut offsets = Vec::new();
        for (key, bytes) in &data_items {
            offsets.push((key.clone(), blob.len() as u64));
            blob.extend_from_slice(bytes);
            blob.push(asm::RET);
        }
        let idx = out.add_section(NewSection::progbits(".gw.data", SHF_ALLOC, blob))?;
        let base = out.sections[idx].sh_addr;
        for (key, off) in offsets {
            data_addrs.insert(key, base + off);
        }
        data_sec_idx = Some(idx);
    }

    // Windows decode against the pristine input image.
    let mut windows: BTreeMap<usize, Vec<(Instruction, Vec<u8>)>> = BTreeMap::new();
    for (i, action) in plan.actions.iter().enumerate() {
        if let Some(w) = action_window(action) {
            windows.insert(i, decode_window(image, w)?);
        }
    }

    // Text chunk layout. Chunk bytes depend only on their own address and
    // per-action seed, so a sizing pass at a provisional base fixes every
    // offset and the real pass re-draws identical choices.
    let mut chunks: Vec<TextChunk> = Vec::new();
    let mut stub_names = BTreeSet::new();
    for action in &plan.actions {
        if let ActionKind::InsertSymbolLoad {
            name,
            object: false,
        } = &action.kind
        {
            if defined_symbol_value(image, name, false).is_none()
                && stub_names.insert(name.clone())
            {
                chunks.push(TextChunk::FuncStub { name: name.clone() });
            }
        }
    }
    for (i, action) in plan.actions.iter().enumerate() {
        if matches!(
            action.kind,
            ActionKind::InsertFunction { .. }
                | ActionKind::InsertCallTo { .. }
                | ActionKind::InsertSymbolLoad { .. }
                | ActionKind::InsertDataLoad { .. }
                | ActionKind::InsertNop { .. }
                | ActionKind::SplitAddrLoad { .. }
                | ActionKind::ConvToIndCall { .. }
        ) {
            chunks.push(TextChunk::Action(i));
        }
    }

    if !chunks.is_empty() {
        let gen = |base: u64| {
            gen_text(
                &chunks, plan, base, seed, &env, &imports, &data_addrs, &windows, image,
                &annot_ctx,
            )
        };
        let total = gen(provisional_base(image))?.content.len();
        let idx = out.add_section(NewSection::progbits(
            ".gw.text",
            SHF_ALLOC | SHF_EXECINSTR,
            vec![0u8; total],
        ))?;
        let base = out.sections[idx].sh_addr;
        let layout = gen(base)?;
        if layout.content.len() != total {
            return Err(RewriteError::PlanMismatch(
                "layout changed between sizing and placement".into(),
            ));
        }
        out.patch_bytes_at_vaddr(base, &layout.content)?;
        debug_assert!(base + total as u64 <= env.high_hole);

        // Symbols: exact names for requested definitions, seeded names for
        // the synthetic carriers the code sweep needs as roots.
        for (name, off) in &layout.stubs {
            add_text_symbol(&mut out, idx, name, base + off, 1, SymbolType::Func, true)?;
        }
        for (key, addr) in &data_addrs {
            if let Some(name) = key.strip_prefix("o\0") {
                let sec = data_sec_idx.expect("object cells imply a data section");
                let sym = Symbol {
                    name: name.to_string(),
                    value: *addr,
                    size: 8,
                    sym_type: SymbolType::Object,
                    binding: SymbolBinding::Global,
                    visibility: 0,
                    section_index: sec as u16,
                };
                out.add_symbol(SymbolTableKind::Symtab, &sym)?;
            }
        }
        for (action_idx, off, len) in &layout.bodies {
            let mut rng = action_rng(seed, *action_idx, SALT_NAME);
            let tag: u32 = rng.gen();
            let prefix = match plan.actions[*action_idx].kind {
                ActionKind::InsertNop { .. }
                | ActionKind::SplitAddrLoad { .. }
                | ActionKind::ConvToIndCall { .. } => "gw_t",
                _ => "gw_f",
            };
            add_text_symbol(
                &mut out,
                idx,
                &format!("{prefix}_{tag:08x}"),
                base + off,
                *len,
                SymbolType::Func,
                false,
            )?;
        }

        // Window patches: jump to the trampoline, nop fill, continuation
        // symbol where execution used to fall through.
        for (action_idx, tramp_vaddr) in &layout.tramps {
            let action = &plan.actions[*action_idx];
            let w = action_window(action).expect("trampoline implies a window");
            let mut patch =
                asm::jmp_rel32(w.vaddr, *tramp_vaddr).map_err(RewriteError::PlanMismatch)?;
            patch.resize(w.len as usize, asm::NOP);
            out.patch_bytes_at_vaddr(w.vaddr, &patch)?;
            let last_is_term = windows[action_idx]
                .last()
                .map(|(insn, _)| insn.is_terminator())
                .unwrap_or(true);
            if !last_is_term {
                let cont_sec = out.section_at_vaddr(w.end()).map(|(i, _)| i);
                if let Some(cont_sec) = cont_sec {
                    let mut rng = action_rng(seed, *action_idx, SALT_NAME ^ 0xc0);
                    let tag: u32 = rng.gen();
                    add_text_symbol(
                        &mut out,
                        cont_sec,
                        &format!("gw_c_{tag:08x}"),
                        w.end(),
                        0,
                        SymbolType::Func,
                        false,
                    )?;
                }
            }
        }
    }

    // Swaps and overwrites mutate original bytes in place.
    for (i, action) in plan.actions.iter().enumerate() {
        match &action.kind {
            ActionKind::Swap {
                first,
                first_len,
                second,
                second_len,
            } => {
                let a = out
                    .read_vaddr(*first, *first_len as u64)
                    .ok_or_else(|| RewriteError::PlanMismatch("swap site unmapped".into()))?
                    .to_vec();
                let b = out
                    .read_vaddr(*second, *second_len as u64)
                    .ok_or_else(|| RewriteError::PlanMismatch("swap site unmapped".into()))?
                    .to_vec();
                let mut joined = b;
                joined.extend_from_slice(&a);
                out.patch_bytes_at_vaddr(*first, &joined)?;
            }
            ActionKind::Overwrite { offset, len, text } => {
                apply_overwrite(
                    &mut out,
                    *offset,
                    *len,
                    text,
                    action_rng(seed, i, SALT_OVERWRITE),
                )?;
            }
            _ => {}
        }
    }

    // Linear payloads, each behind the ret sled that re-synchronizes any
    // decode carrying in from earlier file bytes.
    let lin_actions: Vec<(usize, &str)> = plan
        .actions
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match &a.kind {
            ActionKind::InsertNonCodeBytes { text } => Some((i, text.as_str())),
            _ => None,
        })
        .collect();
    if !lin_actions.is_empty() {
        let mut blob = vec![asm::RET; SLED_LEN];
        for (i, text) in lin_actions {
            let mut rng = action_rng(seed, i, SALT_LIN);
            let parts = asm::assemble_feature(text, blob.len() as u64, &AsmEnv::linear(), &mut rng)
                .map_err(RewriteError::PlanMismatch)?;
            for p in parts {
                blob.extend_from_slice(&p);
            }
            blob.push(asm::RET);
        }
        out.add_section(NewSection::progbits(".gw.lin", 0, blob))?;
    }

    Ok(out)
}

fn action_callees(action: &Action) -> Vec<String> {
    match &action.kind {
        ActionKind::InsertCallTo { callee } => vec![callee.clone()],
        ActionKind::InsertFunction { text } => text
            .split("; ")
            .filter_map(|seg| call_feature_callee(seg).map(str::to_string))
            .collect(),
        _ => Vec::new(),
    }
}

fn action_window(action: &Action) -> Option<Window> {
    match &action.kind {
        ActionKind::InsertNop { window, .. }
        | ActionKind::SplitAddrLoad { window }
        | ActionKind::ConvToIndCall { window, .. } => Some(*window),
        _ => None,
    }
}

fn decode_window(image: &ElfImage, w: Window) -> Result<Vec<(Instruction, Vec<u8>)>> {
    let bytes = image
        .read_vaddr(w.vaddr, w.len as u64)
        .ok_or_else(|| RewriteError::PlanMismatch(format!("window {:#x} unmapped", w.vaddr)))?
        .to_vec();
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let insn = decode_one(&bytes, pos, w.vaddr + pos as u64);
        let len = insn.length as usize;
        out.push((insn, bytes[pos..pos + len].to_vec()));
        pos += len;
    }
    Ok(out)
}

struct TextLayout {
    content: Vec<u8>,
    /// Requested function-symbol stubs: name -> section offset.
    stubs: Vec<(String, u64)>,
    /// Synthetic bodies: action index, section offset, length.
    bodies: Vec<(usize, u64, u64)>,
    /// Trampoline entry vaddrs per action index.
    tramps: Vec<(usize, u64)>,
}

#[allow(clippy::too_many_arguments)]
fn gen_text(
    chunks: &[TextChunk],
    plan: &ModificationPlan,
    base: u64,
    seed: u64,
    env: &AsmEnv,
    imports: &BTreeMap<String, u64>,
    data_addrs: &BTreeMap<String, u64>,
    windows: &BTreeMap<usize, Vec<(Instruction, Vec<u8>)>>,
    image: &ElfImage,
    annot_ctx: &AnnotationContext,
) -> Result<TextLayout> {
    let mut layout = TextLayout {
        content: vec![asm::RET; SLED_LEN],
        stubs: Vec::new(),
        bodies: Vec::new(),
        tramps: Vec::new(),
    };
    for chunk in chunks {
        let at = base + layout.content.len() as u64;
        match chunk {
            TextChunk::FuncStub { name } => {
                layout
                    .stubs
                    .push((name.clone(), layout.content.len() as u64));
                layout.content.push(asm::RET);
            }
            TextChunk::Action(i) => {
                let action = &plan.actions[*i];
                let mut rng = action_rng(seed, *i, SALT_CHUNK);
                let start = layout.content.len() as u64;
                let bytes = match &action.kind {
                    ActionKind::InsertFunction { text } => {
                        gen_function(text, at, env, imports, &mut rng)?
                    }
                    ActionKind::InsertCallTo { callee } => {
                        let mut b = asm::call_rel32(at, imports[callee])
                            .map_err(RewriteError::PlanMismatch)?;
                        b.push(asm::RET);
                        b
                    }
                    ActionKind::InsertSymbolLoad { name, object } => {
                        let target = if *object {
                            defined_symbol_value(image, name, true)
                                .or_else(|| data_addrs.get(&format!("o\0{name}")).copied())
                                .expect("object cell exists")
                        } else if let Some(v) = defined_symbol_value(image, name, false) {
                            v
                        } else {
                            let off = layout
                                .stubs
                                .iter()
                                .find(|(n, _)| n == name)
                                .map(|(_, o)| *o)
                                .expect("stub precedes loader");
                            base + off
                        };
                        let mut b = asm::lea_rip(Reg::new(0, 8), at, target)
                            .map_err(RewriteError::PlanMismatch)?;
                        b.push(asm::RET);
                        b
                    }
                    ActionKind::InsertDataLoad { data } => {
                        let target = data_addrs[&format!("s\0{data}")];
                        let mut b = asm::lea_rip(Reg::new(0, 8), at, target)
                            .map_err(RewriteError::PlanMismatch)?;
                        b.push(asm::RET);
                        b
                    }
                    ActionKind::InsertNop { window, nop_after } => {
                        layout.tramps.push((*i, at));
                        gen_reloc_tramp(&windows[i], *window, *nop_after, at)?
                    }
                    ActionKind::SplitAddrLoad { window } => {
                        layout.tramps.push((*i, at));
                        gen_split_tramp(
                            &windows[i],
                            *window,
                            at,
                            &plan.options,
                            &mut rng,
                            image,
                            annot_ctx,
                        )?
                    }
                    ActionKind::ConvToIndCall { window, target } => {
                        layout.tramps.push((*i, at));
                        gen_conv_tramp(*window, *target, at, &plan.options)?
                    }
                    _ => unreachable!("non-text action in chunk list"),
                };
                layout.content.extend_from_slice(&bytes);
                layout
                    .bodies
                    .push((*i, start, layout.content.len() as u64 - start));
            }
        }
    }
    Ok(layout)
}

fn gen_function(
    text: &str,
    mut at: u64,
    env: &AsmEnv,
    imports: &BTreeMap<String, u64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u8>> {
    let (code_body, _) = function_bodies(text);
    let mut out = Vec::new();
    for (seg, _) in &code_body {
        let bytes = if let Some(callee) = call_feature_callee(seg) {
            asm::call_rel32(at, imports[callee]).map_err(RewriteError::PlanMismatch)?
        } else {
            asm::assemble_text(seg, at, env, rng).map_err(RewriteError::PlanMismatch)?
        };
        at += bytes.len() as u64;
        out.extend(bytes);
    }
    Ok(out)
}

fn gen_reloc_tramp(
    insns: &[(Instruction, Vec<u8>)],
    window: Window,
    nop_after: Option<u64>,
    base: u64,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (insn, bytes) in insns {
        let moved = asm::relocate(bytes, insn, base + out.len() as u64).ok_or_else(|| {
            RewriteError::PlanMismatch(format!("instruction at {:#x} cannot move", insn.vaddr))
        })?;
        out.extend(moved);
        if nop_after == Some(insn.vaddr) {
            out.push(asm::NOP);
        }
    }
    let last = &insns.last().expect("window is never empty").0;
    if !last.is_terminator() {
        let back = asm::jmp_rel32(base + out.len() as u64, window.end())
            .map_err(RewriteError::PlanMismatch)?;
        out.extend(back);
    }
    Ok(out)
}

fn gen_split_tramp(
    insns: &[(Instruction, Vec<u8>)],
    window: Window,
    base: u64,
    opts: &RewriteOptions,
    rng: &mut ChaCha8Rng,
    image: &ElfImage,
    annot_ctx: &AnnotationContext,
) -> Result<Vec<u8>> {
    let (insn, _) = insns.first().expect("split window holds the load");
    let shape = SplitShape::of(insn).ok_or_else(|| {
        RewriteError::PlanMismatch(format!("no splittable load at {:#x}", insn.vaddr))
    })?;
    let target = shape.target();
    // Pick an offset whose shifted address resolves to nothing, so the
    // rebuilt sequence carries no annotation at all.
    let mut k = 1u64;
    let mut found = false;
    for _ in 0..16 {
        let candidate = if opts.diversity {
            rng.gen_range(1..=255u64)
        } else {
            k
        };
        if annot_ctx
            .data_ref_name(image, target.wrapping_sub(candidate))
            .is_none()
        {
            k = candidate;
            found = true;
            break;
        }
        if !opts.diversity {
            k += 1;
        }
    }
    if !found {
        k = 1;
    }
    let (scratch, save) = shape.scratch(opts);
    let mut out = Vec::new();
    if save {
        out.push(0x41);
        out.push(0x50 | (scratch.index & 7));
    }
    match shape {
        SplitShape::LeaRip { dst, .. } => {
            let lea = asm::lea_rip(dst, base + out.len() as u64, target.wrapping_sub(k))
                .map_err(RewriteError::PlanMismatch)?;
            out.extend(lea);
            out.extend(asm::add_reg_imm(dst, k as i64));
        }
        SplitShape::MovLoadRip { dst, .. } => {
            let lea = asm::lea_rip(scratch, base + out.len() as u64, target.wrapping_sub(k))
                .map_err(RewriteError::PlanMismatch)?;
            out.extend(lea);
            out.extend(asm::add_reg_imm(scratch, k as i64));
            out.extend(asm::mov_load(dst, scratch));
        }
        SplitShape::MovImmAddr { dst, .. } => {
            out.extend(mov_reg_value(dst, target.wrapping_sub(k)));
            out.extend(asm::add_reg_imm(dst, k as i64));
        }
    }
    if save {
        out.push(0x41);
        out.push(0x58 | (scratch.index & 7));
    }
    let back = asm::jmp_rel32(base + out.len() as u64, window.end())
        .map_err(RewriteError::PlanMismatch)?;
    out.extend(back);
    Ok(out)
}

/// mov dst, value using the conventional immediate forms for each width.
fn mov_reg_value(dst: Reg, value: u64) -> Vec<u8> {
    let mut out = Vec::new();
    match dst.size {
        8 => {
            if value <= i32::MAX as u64 {
                out.push(0x48 | ((dst.index >= 8) as u8));
                out.push(0xc7);
                out.push(0xc0 | (dst.index & 7));
                out.extend_from_slice(&(value as u32).to_le_bytes());
            } else {
                out.push(0x48 | ((dst.index >= 8) as u8));
                out.push(0xb8 | (dst.index & 7));
                out.extend_from_slice(&value.to_le_bytes());
            }
        }
        4 => {
            if dst.index >= 8 {
                out.push(0x41);
            }
            out.push(0xb8 | (dst.index & 7));
            out.extend_from_slice(&(value as u32).to_le_bytes());
        }
        2 => {
            out.push(0x66);
            if dst.index >= 8 {
                out.push(0x41);
            }
            out.push(0xb8 | (dst.index & 7));
            out.extend_from_slice(&(value as u16).to_le_bytes());
        }
        _ => {
            if dst.index >= 8 {
                out.push(0x41);
            } else if (4..8).contains(&dst.index) {
                out.push(0x40);
            }
            out.push(0xb0 | (dst.index & 7));
            out.push(value as u8);
        }
    }
    out
}

fn gen_conv_tramp(
    window: Window,
    target: u64,
    base: u64,
    opts: &RewriteOptions,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if opts.scratch_save_restore {
        out.extend_from_slice(&asm::PUSH_R11);
    }
    // The target address must survive load-base randomization, so it is
    // computed relative to rip; the trampoline always sits above it.
    let lea = asm::lea_rip(Reg::new(11, 8), base + out.len() as u64, target)
        .map_err(RewriteError::PlanMismatch)?;
    out.extend(lea);
    out.extend_from_slice(&asm::CALL_R11);
    if opts.scratch_save_restore {
        out.extend_from_slice(&asm::POP_R11);
    }
    let back = asm::jmp_rel32(base + out.len() as u64, window.end())
        .map_err(RewriteError::PlanMismatch)?;
    out.extend(back);
    Ok(out)
}

fn provisional_base(image: &ElfImage) -> u64 {
    let mut high = 0u64;
    for s in &image.sections {
        if s.is_alloc() {
            high = high.max(s.sh_addr + s.sh_size);
        }
    }
    (high + 0xffff) & !0xfff
}

fn add_text_symbol(
    out: &mut ElfImage,
    sec_idx: usize,
    name: &str,
    value: u64,
    size: u64,
    sym_type: SymbolType,
    global: bool,
) -> Result<()> {
    let sym = Symbol {
        name: name.to_string(),
        value,
        size,
        sym_type,
        binding: if global {
            SymbolBinding::Global
        } else {
            SymbolBinding::Local
        },
        visibility: 0,
        section_index: sec_idx as u16,
    };
    out.add_symbol(SymbolTableKind::Symtab, &sym)?;
    Ok(())
}

fn apply_overwrite(
    out: &mut ElfImage,
    offset: u64,
    len: u32,
    text: &str,
    mut rng: ChaCha8Rng,
) -> Result<()> {
    let (sec_idx, rel, end) = {
        let (sec_idx, sec) = out
            .section_at_offset(offset)
            .ok_or_else(|| RewriteError::PlanMismatch(format!("offset {offset:#x} unmapped")))?;
        let rel = (offset - sec.sh_offset) as usize;
        let end = rel + len as usize;
        if end > sec.data.len() {
            return Err(RewriteError::PlanMismatch(format!(
                "overwrite {offset:#x}+{len} leaves section {}",
                sec.name
            )));
        }
        (sec_idx, rel, end)
    };
    let original: Vec<u8> = out.sections[sec_idx].data[rel..end].to_vec();
    for _ in 0..128 {
        let mut candidate = original.clone();
        for b in candidate.iter_mut() {
            // NUL bytes are string terminators in every section this
            // primitive touches; keeping them preserves table structure.
            if *b != 0 {
                *b = rng.gen_range(0x21..=0x7e);
            }
        }
        if !reproduces_feature(&candidate, text) {
            out.sections[sec_idx].data[rel..end].copy_from_slice(&candidate);
            return Ok(());
        }
    }
    Err(RewriteError::PlanMismatch(format!(
        "could not repaint {offset:#x}+{len} without reproducing the feature"
    )))
}

/// Does this byte run still decode (from its start) to the removed feature?
fn reproduces_feature(bytes: &[u8], text: &str) -> bool {
    let mut texts = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() && texts.len() < 2 {
        let insn = decode_one(bytes, pos, 0x1000 + pos as u64);
        texts.push(normalize_tokens(&insn.text()));
        pos += insn.length as usize;
    }
    match text.split_once("; ") {
        None => texts.first().map(String::as_str) == Some(text),
        Some(_) => texts.len() == 2 && format!("{}; {}", texts[0], texts[1]) == text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elf::parse;
    use crate::features::extract;

    fn compile_c(dir: &std::path::Path, source: &str) -> ElfImage {
        let src = dir.join("prog.c");
        std::fs::write(&src, source).unwrap();
        let out = dir.join("prog");
        let status = std::process::Command::new("gcc")
            .arg("-O0")
            .arg("-o")
            .arg(&out)
            .arg(&src)
            .status()
            .expect("gcc not available");
        assert!(status.success(), "gcc failed");
        parse(&std::fs::read(&out).unwrap()).unwrap()
    }

    fn run_image(image: &ElfImage, dir: &std::path::Path, name: &str) -> std::process::Output {
        use std::os::unix::fs::PermissionsExt;
        let path = dir.join(name);
        std::fs::write(&path, image.serialize().unwrap()).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        std::process::Command::new(&path).output().unwrap()
    }

    fn table_of(keys: &[FeatureKey]) -> FeatureTable {
        let mut tsv = String::new();
        for k in keys {
            tsv.push_str(&format!("{}\t{}\t0.5\t{}\n", k.extractor, k.group, k.text));
        }
        FeatureTable::from_tsv(&tsv).unwrap()
    }

    fn delta_of(changes: &[(usize, i64)]) -> Delta {
        Delta {
            changes: changes.iter().copied().collect(),
            strategy: "test",
            iterations: 0,
        }
    }

    fn count(image: &ElfImage, key: &FeatureKey) -> u64 {
        extract(image).get(key).copied().unwrap_or(0)
    }

    const PAIR_ASM: &str = r#"__asm__ volatile("mov $1, %%r13d\n\tlea 8(%%r14), %%r15" ::: "r13", "r15");"#;

    #[test]
    fn linear_injection_lands_in_unmapped_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "#include <stdio.h>\nint main(void){ puts(\"stomp\"); return 0; }\n",
        );
        let key = FeatureKey::linear("or [rax],ebp");
        let table = table_of(std::slice::from_ref(&key));
        let before = count(&image, &key);

        let plan = plan(
            &delta_of(&[(0, 2)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 2);
        for a in &plan.actions {
            assert!(matches!(a.kind, ActionKind::InsertNonCodeBytes { .. }));
            assert!(!a.payload.is_empty());
            assert_eq!(a.expected.get(&0), Some(&1));
        }
        assert_eq!(plan.planned.get(&0), Some(&2));

        let out = apply(&image, &plan, 7).unwrap();
        assert_eq!(count(&out, &key), before + 2);

        // The carrier section must never enter the process image.
        let reparsed = parse(&out.serialize().unwrap()).unwrap();
        let lin = reparsed
            .sections
            .iter()
            .find(|s| s.name == ".gw.lin")
            .expect("carrier section missing");
        assert_eq!(lin.sh_flags & SHF_ALLOC, 0);
        assert_eq!(lin.sh_addr, 0);

        let run = run_image(&out, dir.path(), "lin_inject");
        assert!(run.status.success());
        assert_eq!(run.stdout, b"stomp\n");
    }

    #[test]
    fn empty_plan_reproduces_input_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(dir.path(), "int main(void){ return 0; }\n");
        let table = table_of(&[FeatureKey::code("ret")]);
        let plan = plan(
            &delta_of(&[]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert!(plan.is_empty());
        let out = apply(&image, &plan, 3).unwrap();
        assert_eq!(out.serialize().unwrap(), image.serialize().unwrap());
    }

    #[test]
    fn reachable_unigram_removal_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "int main(void){ __asm__ volatile(\"mov $11, %%r13d\" ::: \"r13\"); return 0; }\n",
        );
        let key = FeatureKey::code("mov r13d,hexadecimal");
        assert_eq!(count(&image, &key), 1, "fixture must plant the feature");
        let table = table_of(std::slice::from_ref(&key));

        let err = plan(
            &delta_of(&[(0, -1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap_err();
        match err {
            RewriteError::NoStrategy { column, reason } => {
                assert_eq!(column, 0);
                assert!(reason.contains("behavior"), "unexpected reason: {reason}");
            }
            other => panic!("expected NoStrategy, got {other}"),
        }
    }

    #[test]
    fn removal_stops_when_sites_run_out() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            &format!(
                "int scratch;\nint main(void){{ {PAIR_ASM} scratch += 1; {PAIR_ASM} return 0; }}\n"
            ),
        );
        let key = FeatureKey::code("mov r13d,hexadecimal; lea r15,[r14+hexadecimal]");
        assert_eq!(count(&image, &key), 2);
        let table = table_of(std::slice::from_ref(&key));

        let err = plan(
            &delta_of(&[(0, -3)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap_err();
        match err {
            RewriteError::NoStrategy { column, reason } => {
                assert_eq!(column, 0);
                assert!(reason.contains("occurrence"), "unexpected reason: {reason}");
            }
            other => panic!("expected NoStrategy, got {other}"),
        }
    }

    #[test]
    fn injected_function_changes_exactly_the_tracked_columns() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(dir.path(), "int main(void){ return 0; }\n");
        let keys = [
            FeatureKey::code("mov r13d,hexadecimal"),
            FeatureKey::code("ret"),
            FeatureKey::code("mov r13d,hexadecimal; ret"),
            FeatureKey::linear("mov r13d,hexadecimal"),
        ];
        let table = table_of(&keys);
        let before: Vec<u64> = keys.iter().map(|k| count(&image, k)).collect();

        let plan = plan(
            &delta_of(&[(0, 1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 1);
        assert!(matches!(plan.actions[0].kind, ActionKind::InsertFunction { .. }));
        assert_eq!(plan.table_version, table.version);
        let expected: Vec<i64> = (0..4)
            .map(|c| plan.actions[0].expected.get(&c).copied().unwrap_or(0))
            .collect();
        assert_eq!(expected, vec![1, 1, 1, 1]);

        let out = apply(&image, &plan, 11).unwrap();
        for (i, k) in keys.iter().enumerate() {
            assert_eq!(count(&out, k), before[i] + 1, "column {i} drifted");
        }
        let run = run_image(&out, dir.path(), "fn_inject");
        assert!(run.status.success());
    }

    #[test]
    fn call_injection_imports_a_weak_symbol() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "#include <stdio.h>\nint main(void){ puts(\"keep\"); return 0; }\n",
        );
        let keys = [
            FeatureKey::code("call fchdir"),
            FeatureKey::annot("fchdir"),
        ];
        let table = table_of(&keys);
        assert_eq!(count(&image, &keys[0]), 0);

        let plan = plan(
            &delta_of(&[(0, 1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 1);
        assert!(
            matches!(&plan.actions[0].kind, ActionKind::InsertCallTo { callee } if callee == "fchdir")
        );
        assert_eq!(plan.actions[0].expected.get(&1), Some(&1));

        let out = apply(&image, &plan, 5).unwrap();
        assert_eq!(count(&out, &keys[0]), 1);
        assert_eq!(count(&out, &keys[1]), 1);

        // The import must not break dynamic loading.
        let run = run_image(&out, dir.path(), "call_inject");
        assert!(run.status.success());
        assert_eq!(run.stdout, b"keep\n");
    }

    #[test]
    fn symbol_and_string_loads_materialize_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(dir.path(), "int main(void){ return 0; }\n");
        let keys = [
            FeatureKey::annot("obj.night_watch"),
            FeatureKey::annot("sym.quiet_helper"),
            FeatureKey::annot("timeworn lattice"),
        ];
        let table = table_of(&keys);

        let plan = plan(
            &delta_of(&[(0, 1), (1, 1), (2, 1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 3);

        let out = apply(&image, &plan, 21).unwrap();
        for k in &keys {
            assert_eq!(count(&out, k), 1, "missing annotation {}", k.text);
        }
        let symtab = out.symbols(SymbolTableKind::Symtab).unwrap();
        let cell = symtab.iter().find(|s| s.name == "night_watch").unwrap();
        assert_eq!(cell.sym_type, SymbolType::Object);
        let stub = symtab.iter().find(|s| s.name == "quiet_helper").unwrap();
        assert_eq!(stub.sym_type, SymbolType::Func);

        let run = run_image(&out, dir.path(), "annot_inject");
        assert!(run.status.success());
    }

    #[test]
    fn split_load_drops_annotation_and_keeps_output() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "#include <stdio.h>\nint counter = 42;\nint main(void){ printf(\"%d\\n\", counter); return 0; }\n",
        );
        let key = FeatureKey::annot("obj.counter");
        assert_eq!(count(&image, &key), 1, "fixture must reference counter");
        let table = table_of(std::slice::from_ref(&key));

        let plan = plan(
            &delta_of(&[(0, -1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 1);
        assert!(matches!(plan.actions[0].kind, ActionKind::SplitAddrLoad { .. }));

        let out = apply(&image, &plan, 13).unwrap();
        assert_eq!(count(&out, &key), 0);
        let run = run_image(&out, dir.path(), "split");
        assert!(run.status.success());
        assert_eq!(run.stdout, b"42\n");
    }

    #[test]
    fn call_conversion_drops_annotation_and_keeps_output() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "#include <stdio.h>\nint main(void){ puts(\"steady\"); return 0; }\n",
        );
        let key = FeatureKey::annot("puts");
        assert_eq!(count(&image, &key), 1);
        let table = table_of(std::slice::from_ref(&key));

        let plan = plan(
            &delta_of(&[(0, -1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 1);
        assert!(matches!(plan.actions[0].kind, ActionKind::ConvToIndCall { .. }));

        let out = apply(&image, &plan, 17).unwrap();
        assert_eq!(count(&out, &key), 0);
        assert!(out
            .symbols(SymbolTableKind::Symtab)
            .unwrap()
            .iter()
            .any(|s| s.name.starts_with("gw_t_")));
        let run = run_image(&out, dir.path(), "conv");
        assert!(run.status.success());
        assert_eq!(run.stdout, b"steady\n");
    }

    #[test]
    fn swap_flips_an_independent_pair() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            &format!("int main(void){{ {PAIR_ASM} return 0; }}\n"),
        );
        let key = FeatureKey::code("mov r13d,hexadecimal; lea r15,[r14+hexadecimal]");
        let flipped = FeatureKey::code("lea r15,[r14+hexadecimal]; mov r13d,hexadecimal");
        assert_eq!(count(&image, &key), 1);
        let table = table_of(std::slice::from_ref(&key));

        let plan = plan(
            &delta_of(&[(0, -1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 1);
        assert!(matches!(plan.actions[0].kind, ActionKind::Swap { .. }));

        let out = apply(&image, &plan, 19).unwrap();
        assert_eq!(count(&out, &key), 0);
        assert_eq!(count(&out, &flipped), 1);
        let run = run_image(&out, dir.path(), "swap");
        assert!(run.status.success());
    }

    #[test]
    fn nop_insertion_breaks_a_dependent_pair() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "int main(void){ __asm__ volatile(\"mov $5, %%r13d\\n\\tmov %%r13d, %%r15d\" ::: \"r13\", \"r15\"); return 0; }\n",
        );
        let key = FeatureKey::code("mov r13d,hexadecimal; mov r15d,r13d");
        assert_eq!(count(&image, &key), 1);
        let table = table_of(std::slice::from_ref(&key));

        let plan = plan(
            &delta_of(&[(0, -1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 1);
        match &plan.actions[0].kind {
            ActionKind::InsertNop { nop_after, .. } => assert!(nop_after.is_some()),
            other => panic!("expected InsertNop, got {}", other.primitive()),
        }

        let out = apply(&image, &plan, 23).unwrap();
        assert_eq!(count(&out, &key), 0);
        let symtab = out.symbols(SymbolTableKind::Symtab).unwrap();
        assert!(symtab.iter().any(|s| s.name.starts_with("gw_t_")));
        let run = run_image(&out, dir.path(), "nopins");
        assert!(run.status.success());
    }

    /// Symbolic state over the 16 general registers. Values are opaque terms;
    /// two programs are equivalent when they leave identical terms everywhere.
    #[derive(Clone, PartialEq, Debug)]
    enum Sym {
        Init(u8),
        Imm(i64),
        Zext32(Box<Sym>),
        Insert {
            old: Box<Sym>,
            val: Box<Sym>,
            bytes: u8,
            high: bool,
        },
        Read {
            src: Box<Sym>,
            bytes: u8,
            high: bool,
        },
        Addr {
            base: Option<Box<Sym>>,
            index: Option<(Box<Sym>, u8)>,
            disp: i64,
        },
        Unknown,
    }

    fn sym_read(state: &[Sym; 16], r: Reg) -> Sym {
        let cur = state[r.index as usize].clone();
        if r.size == 8 {
            cur
        } else {
            Sym::Read {
                src: Box::new(cur),
                bytes: r.size,
                high: r.high,
            }
        }
    }

    fn sym_write(state: &mut [Sym; 16], r: Reg, val: Sym) {
        let slot = &mut state[r.index as usize];
        *slot = match r.size {
            8 => val,
            4 => Sym::Zext32(Box::new(val)),
            _ => Sym::Insert {
                old: Box::new(slot.clone()),
                val: Box::new(val),
                bytes: r.size,
                high: r.high,
            },
        };
    }

    fn sym_step(state: &mut [Sym; 16], insn: &Instruction) {
        match (insn.mnemonic, insn.operands.as_slice()) {
            ("nop", _) => {}
            ("mov", [Operand::Reg(d), Operand::Reg(s)]) => {
                let v = sym_read(state, *s);
                sym_write(state, *d, v);
            }
            ("mov", [Operand::Reg(d), Operand::Imm { value, .. }]) => {
                sym_write(state, *d, Sym::Imm(*value));
            }
            ("lea", [Operand::Reg(d), Operand::Mem(m)]) => {
                let addr = Sym::Addr {
                    base: m.base.map(|b| Box::new(sym_read(state, b))),
                    index: m.index.map(|i| (Box::new(sym_read(state, i)), m.scale)),
                    disp: m.disp,
                };
                sym_write(state, *d, addr);
            }
            (_, ops) => {
                // Anything unmodeled clobbers every register it names, which
                // over-taints but never hides a difference.
                for op in ops {
                    if let Operand::Reg(r) = op {
                        sym_write(state, *r, Sym::Unknown);
                    }
                }
            }
        }
    }

    fn run_pair(a: &Instruction, b: &Instruction) -> [Sym; 16] {
        let mut state: [Sym; 16] = std::array::from_fn(|i| Sym::Init(i as u8));
        sym_step(&mut state, a);
        sym_step(&mut state, b);
        state
    }

    #[test]
    fn swap_eligibility_commutes_under_symbolic_execution() {
        let pool: &[&[u8]] = &[
            &[0x90],                                 // nop
            &[0x48, 0x89, 0xd8],                     // mov rax, rbx
            &[0x48, 0x89, 0xc3],                     // mov rbx, rax
            &[0xb8, 0x05, 0x00, 0x00, 0x00],         // mov eax, 5
            &[0x41, 0xbd, 0x01, 0x00, 0x00, 0x00],   // mov r13d, 1
            &[0x89, 0xe8],                           // mov eax, ebp
            &[0x88, 0xdc],                           // mov ah, bl
            &[0xb3, 0x07],                           // mov bl, 7
            &[0x4d, 0x8d, 0x7e, 0x08],               // lea r15, [r14+8]
            &[0x48, 0x8d, 0x04, 0x4b],               // lea rax, [rbx+rcx*2]
            &[0x01, 0xd8],                           // add eax, ebx
            &[0x49, 0x89, 0xc5],                     // mov r13, rax
            &[0x44, 0x89, 0xef],                     // mov edi, r13d
            &[0x40, 0xb6, 0x09],                     // mov sil, 9
        ];
        let insns: Vec<Instruction> = pool
            .iter()
            .map(|b| {
                let insn = decode_one(b, 0, 0x1000);
                assert_ne!(insn.mnemonic, "db", "pool instruction must decode");
                assert_eq!(insn.length as usize, b.len());
                insn
            })
            .collect();

        let mut eligible_pairs = 0;
        for a in &insns {
            for b in &insns {
                if !swap_eligible(a, b) {
                    continue;
                }
                eligible_pairs += 1;
                assert_eq!(
                    run_pair(a, b),
                    run_pair(b, a),
                    "swap of `{}` and `{}` is not order-free",
                    a.text(),
                    b.text()
                );
            }
        }
        assert!(eligible_pairs >= 4, "pool must exercise the swap rule");

        // Known dependent and unmodeled cases stay ineligible.
        let mov_ab = decode_one(&[0x48, 0x89, 0xd8], 0, 0x1000);
        let mov_ba = decode_one(&[0x48, 0x89, 0xc3], 0, 0x1000);
        let add = decode_one(&[0x01, 0xd8], 0, 0x1000);
        assert!(!swap_eligible(&mov_ab, &mov_ba));
        assert!(!swap_eligible(&add, &mov_ba));
        assert!(!swap_eligible(&mov_ab, &add));
    }

    #[test]
    fn overwrite_repaints_a_comment_site() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "#include <stdio.h>\nint main(void){ puts(\"intact\"); return 0; }\n",
        );
        let extraction = extract_detailed(&image);
        let (key, _) = extraction
            .sites
            .iter()
            .find_map(|(k, sites)| {
                if k.group != Group::LinearInstr {
                    return None;
                }
                sites
                    .iter()
                    .find(|s| {
                        image
                            .section_at_offset(s.file_offset)
                            .is_some_and(|(_, sec)| {
                                sec.name == ".comment"
                                    && s.file_offset + s.length as u64
                                        <= sec.sh_offset + sec.sh_size
                            })
                    })
                    .map(|s| (k.clone(), *s))
            })
            .expect(".comment must decode to at least one feature");
        let table = table_of(std::slice::from_ref(&key));
        let before = count(&image, &key);

        let plan = plan(
            &delta_of(&[(0, -1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 1);
        assert!(matches!(plan.actions[0].kind, ActionKind::Overwrite { .. }));

        let out = apply(&image, &plan, 29).unwrap();
        assert_eq!(count(&out, &key), before - 1);

        // Repainting never moves bytes, so the diff is confined to .comment.
        let old_bytes = image.serialize().unwrap();
        let new_bytes = out.serialize().unwrap();
        assert_eq!(old_bytes.len(), new_bytes.len());
        let (_, sec) = image
            .sections
            .iter()
            .enumerate()
            .find(|(_, s)| s.name == ".comment")
            .unwrap();
        for (i, (o, n)) in old_bytes.iter().zip(&new_bytes).enumerate() {
            if o != n {
                let i = i as u64;
                assert!(
                    i >= sec.sh_offset && i < sec.sh_offset + sec.sh_size,
                    "byte {i:#x} changed outside .comment"
                );
            }
        }
        // NUL terminators separate strings readers still walk.
        let rel = sec.sh_offset as usize..(sec.sh_offset + sec.sh_size) as usize;
        for (o, n) in old_bytes[rel.clone()].iter().zip(&new_bytes[rel]) {
            assert_eq!(*o == 0, *n == 0, "NUL structure altered");
        }

        let run = run_image(&out, dir.path(), "overwrite");
        assert!(run.status.success());
        assert_eq!(run.stdout, b"intact\n");
    }

    #[test]
    fn seeds_vary_payload_bytes_but_not_effects() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(dir.path(), "int main(void){ return 0; }\n");
        let keys = [
            FeatureKey::code("mov r13d,hexadecimal"),
            FeatureKey::linear("or [rax],ebp"),
        ];
        let table = table_of(&keys);
        let before: Vec<u64> = keys.iter().map(|k| count(&image, k)).collect();

        let plan = plan(
            &delta_of(&[(0, 1), (1, 1)]),
            &table,
            &image,
            &RewriteOptions {
                diversity: true,
                ..RewriteOptions::default()
            },
        )
        .unwrap();

        let one = apply(&image, &plan, 1).unwrap().serialize().unwrap();
        let one_again = apply(&image, &plan, 1).unwrap().serialize().unwrap();
        let two = apply(&image, &plan, 2).unwrap().serialize().unwrap();
        assert_eq!(one, one_again, "same seed must be reproducible");
        assert_ne!(one, two, "different seeds must vary payload bytes");

        for bytes in [&one, &two] {
            let out = parse(bytes).unwrap();
            for (i, k) in keys.iter().enumerate() {
                assert_eq!(count(&out, k), before[i] + 1, "column {i} drifted");
            }
        }
    }

    #[test]
    fn plan_log_names_every_action() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(dir.path(), "int main(void){ return 0; }\n");
        let keys = [
            FeatureKey::annot("obj.night_watch"),
            FeatureKey::annot("sym.quiet_helper"),
        ];
        let table = table_of(&keys);
        let plan = plan(
            &delta_of(&[(0, 1), (1, 1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        let log = plan.to_log();
        assert!(log.contains("action=0"));
        assert!(log.contains("action=1"));
        assert!(log.contains("primitive=insert_symbol_load"));
        assert!(log.contains("expected"));
    }

    #[test]
    fn mixed_plan_preserves_program_output() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            &format!(
                "#include <stdio.h>\nint counter = 42;\nint main(void){{ {PAIR_ASM} printf(\"%d\\n\", counter); puts(\"steady\"); return 0; }}\n"
            ),
        );
        let keys = [
            FeatureKey::annot("puts"),
            FeatureKey::annot("obj.counter"),
            FeatureKey::code("call fchdir"),
            FeatureKey::linear("or [rax],ebp"),
            FeatureKey::code("mov r13d,hexadecimal; lea r15,[r14+hexadecimal]"),
        ];
        let table = table_of(&keys);
        let before: Vec<u64> = keys.iter().map(|k| count(&image, k)).collect();
        let changes = [(0, -1), (1, -1), (2, 1), (3, 2), (4, -1)];

        let plan = plan(
            &delta_of(&changes),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        let out = apply(&image, &plan, 99).unwrap();

        for (i, k) in keys.iter().enumerate() {
            let want = before[i] as i64 + changes[i].1;
            assert_eq!(count(&out, k) as i64, want, "column {i} missed its target");
        }
        let run = run_image(&out, dir.path(), "mixed");
        assert!(run.status.success());
        assert_eq!(run.stdout, b"42\nsteady\n");

        let vec_before = table.vectorize(&extract(&image), "before");
        let vec_after = table.vectorize(&extract(&out), "after");
        let report = verify_side_effects(&vec_before, &vec_after, &plan);
        assert!(report.off_target.is_empty(), "{report:?}");
    }

    #[test]
    fn linear_call_sites_removed_by_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "#include <stdio.h>\nint counter = 42;\nint main(void){ printf(\"%d\\n\", counter); puts(\"steady\"); return 0; }\n",
        );
        let key = FeatureKey::linear("call hexadecimal");
        let before = count(&image, &key);
        assert!(before >= 2, "fixture must contain direct calls");
        let table = table_of(std::slice::from_ref(&key));

        let plan = plan(
            &delta_of(&[(0, -2)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 2, "plan:\n{}", plan.to_log());
        let mut windows = Vec::new();
        for a in &plan.actions {
            match &a.kind {
                ActionKind::ConvToIndCall { window, .. } => windows.push(window.vaddr),
                other => panic!("expected ConvToIndCall, got {}", other.primitive()),
            }
        }
        assert_ne!(windows[0], windows[1], "sites must not collide");

        let out = apply(&image, &plan, 31).unwrap();
        // Both planned calls are now trampoline jumps. Whole-file decode
        // noise from shifted unmapped regions may drop further occurrences,
        // so the count bound is one-sided.
        for w in &windows {
            assert_eq!(out.read_vaddr(*w, 1).unwrap(), [0xe9]);
        }
        assert!(count(&out, &key) <= before - 2);
        let run = run_image(&out, dir.path(), "lin_conv");
        assert!(run.status.success());
        assert_eq!(run.stdout, b"42\nsteady\n");
    }

    #[test]
    fn linear_rip_load_removed_by_split() {
        let dir = tempfile::tempdir().unwrap();
        let image = compile_c(
            dir.path(),
            "#include <stdio.h>\nint counter = 42;\nint main(void){ printf(\"%d\\n\", counter); return 0; }\n",
        );
        let key = FeatureKey::linear("mov eax,[rip+hexadecimal]");
        let before = count(&image, &key);
        assert!(before >= 1, "fixture must load a global through rip");
        let table = table_of(std::slice::from_ref(&key));

        let plan = plan(
            &delta_of(&[(0, -1)]),
            &table,
            &image,
            &RewriteOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.actions.len(), 1);

        let out = apply(&image, &plan, 37).unwrap();
        assert_eq!(count(&out, &key), before - 1);
        let run = run_image(&out, dir.path(), "lin_split");
        assert!(run.status.success());
        assert_eq!(run.stdout, b"42\n");
    }
}
