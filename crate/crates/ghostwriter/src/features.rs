//! Feature space construction: token normalization, n-gram counting over
//! both sweeps, information-gain selection, and the table/vector formats
//! everything downstream trains and attacks on.
//!
//! Feature identity is the (extractor, group, text) triple. LINEAR features
//! come from sweeping the whole file, CODE features from the recursive
//! sweep; CODE_ANNOT holds bare annotation names (call targets, symbol and
//! string references). A call whose target resolves contributes its name
//! form ("call fprintf") to CODE_INSTR, its normalized form
//! ("call hexadecimal") to LINEAR_INSTR, and the bare name to CODE_ANNOT.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::decoder::{code_sweep, linear_sweep, AnnotationKind, Instruction};
use crate::elf::ElfImage;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("dataset carries fewer than two distinct labels")]
    DegenerateDataset,
    #[error("vector length {got} does not match table width {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("malformed table line {0}: {1}")]
    MalformedTable(usize, String),
}

type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Extractor {
    Linear,
    Code,
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Extractor::Linear => "LINEAR",
            Extractor::Code => "CODE",
        })
    }
}

impl FromStr for Extractor {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "LINEAR" => Ok(Extractor::Linear),
            "CODE" => Ok(Extractor::Code),
            other => Err(format!("unknown extractor {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    LinearInstr,
    CodeInstr,
    CodeAnnot,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::LinearInstr => "LINEAR_INSTR",
            Group::CodeInstr => "CODE_INSTR",
            Group::CodeAnnot => "CODE_ANNOT",
        })
    }
}

impl FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "LINEAR_INSTR" => Ok(Group::LinearInstr),
            "CODE_INSTR" => Ok(Group::CodeInstr),
            "CODE_ANNOT" => Ok(Group::CodeAnnot),
            other => Err(format!("unknown group {other:?}")),
        }
    }
}

/// Identity of one feature. Texts are unique within (extractor, group).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureKey {
    pub extractor: Extractor,
    pub group: Group,
    pub text: String,
}

impl FeatureKey {
    pub fn linear(text: impl Into<String>) -> Self {
        FeatureKey {
            extractor: Extractor::Linear,
            group: Group::LinearInstr,
            text: text.into(),
        }
    }
    pub fn code(text: impl Into<String>) -> Self {
        FeatureKey {
            extractor: Extractor::Code,
            group: Group::CodeInstr,
            text: text.into(),
        }
    }
    pub fn annot(text: impl Into<String>) -> Self {
        FeatureKey {
            extractor: Extractor::Code,
            group: Group::CodeAnnot,
            text: text.into(),
        }
    }
}

/// Replace numeric literal tokens: 0x-prefixed or bare hex containing a
/// letter become "hexadecimal", all-digit tokens become "number". The
/// leading mnemonic of each ";"-separated segment is never rewritten, which
/// keeps mnemonics that happen to spell hex digits (add, dec, db) intact.
pub fn normalize_tokens(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut token = String::new();
    let mut leading = true;
    let flush = |token: &mut String, out: &mut String, leading: &mut bool| {
        if token.is_empty() {
            return;
        }
        if *leading {
            out.push_str(token);
            *leading = false;
        } else {
            out.push_str(normalize_token(token));
        }
        token.clear();
    };
    for c in raw.chars() {
        match c {
            ' ' => {
                flush(&mut token, &mut out, &mut leading);
                if !out.ends_with(' ') {
                    out.push(' ');
                }
            }
            ',' | '[' | ']' | '+' | '-' | ':' | '*' => {
                flush(&mut token, &mut out, &mut leading);
                out.push(c);
            }
            ';' => {
                flush(&mut token, &mut out, &mut leading);
                out.push(';');
                leading = true;
            }
            _ => token.push(c),
        }
    }
    flush(&mut token, &mut out, &mut leading);
    out
}

fn normalize_token(tok: &str) -> &str {
    if let Some(hex) = tok.strip_prefix("0x") {
        if !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit()) {
            return "hexadecimal";
        }
    }
    if tok.chars().all(|c| c.is_ascii_digit()) {
        return "number";
    }
    if tok.chars().all(|c| c.is_ascii_hexdigit()) && tok.chars().any(|c| c.is_ascii_alphabetic()) {
        return "hexadecimal";
    }
    tok
}

/// One occurrence of a feature in the binary. Bigram sites cover both
/// instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub vaddr: u64,
    pub file_offset: u64,
    pub length: u32,
}

#[derive(Debug, Default, Clone)]
pub struct Extraction {
    pub counts: BTreeMap<FeatureKey, u64>,
    pub sites: BTreeMap<FeatureKey, Vec<Site>>,
}

impl Extraction {
    fn record(&mut self, key: FeatureKey, site: Site) {
        *self.counts.entry(key.clone()).or_insert(0) += 1;
        self.sites.entry(key).or_default().push(site);
    }
}

/// The instruction text a CODE feature is built from: calls with a resolved
/// target use the name instead of the address.
pub(crate) fn code_text(insn: &Instruction) -> String {
    if insn.mnemonic == "call" {
        if let Some(a) = insn
            .annotations
            .iter()
            .find(|a| a.kind == AnnotationKind::CallTarget)
        {
            return format!("call {}", a.name);
        }
    }
    normalize_tokens(&insn.text())
}

/// Bigrams never span an instruction that can transfer control; sequencing
/// across such a boundary is a property of the flow, not the author.
pub(crate) fn cuts_bigram(insn: &Instruction) -> bool {
    insn.is_control_transfer()
}

fn ngram_pass(
    out: &mut Extraction,
    instructions: &[Instruction],
    texts: &[String],
    make_key: impl Fn(String) -> FeatureKey,
) {
    for (i, insn) in instructions.iter().enumerate() {
        out.record(
            make_key(texts[i].clone()),
            Site {
                vaddr: insn.vaddr,
                file_offset: insn.file_offset,
                length: insn.length as u32,
            },
        );
        if i + 1 < instructions.len() && !cuts_bigram(insn) {
            let next = &instructions[i + 1];
            // Straight-line adjacency only: a gap means the sweep jumped to
            // an unrelated root.
            if next.vaddr == insn.vaddr + insn.length as u64 {
                out.record(
                    make_key(format!("{}; {}", texts[i], texts[i + 1])),
                    Site {
                        vaddr: insn.vaddr,
                        file_offset: insn.file_offset,
                        length: (insn.length + next.length) as u32,
                    },
                );
            }
        }
    }
}

/// Full extraction with occurrence sites, the rewriter's planning input.
pub fn extract_detailed(image: &ElfImage) -> Extraction {
    let mut out = Extraction::default();

    let bytes = image
        .serialize()
        .expect("extraction requires a layout-coherent image");
    let linear: Vec<Instruction> = linear_sweep(&bytes).collect();
    let linear_texts: Vec<String> = linear.iter().map(|i| normalize_tokens(&i.text())).collect();
    ngram_pass(&mut out, &linear, &linear_texts, FeatureKey::linear);

    let code = code_sweep(image);
    let code_texts: Vec<String> = code.iter().map(code_text).collect();
    ngram_pass(&mut out, &code, &code_texts, FeatureKey::code);
    for insn in &code {
        for a in &insn.annotations {
            out.record(
                FeatureKey::annot(a.name.clone()),
                Site {
                    vaddr: insn.vaddr,
                    file_offset: insn.file_offset,
                    length: insn.length as u32,
                },
            );
        }
    }
    out
}

/// Frequency of every feature string occurring in the image.
pub fn extract(image: &ElfImage) -> BTreeMap<FeatureKey, u64> {
    extract_detailed(image).counts
}

fn entropy(counts: &HashMap<usize, usize>, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &n in counts.values() {
        if n > 0 {
            let p = n as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

fn presence_gain(present: &[bool], labels: &[usize]) -> f64 {
    let total = labels.len();
    let mut all: HashMap<usize, usize> = HashMap::new();
    let mut on: HashMap<usize, usize> = HashMap::new();
    let mut off: HashMap<usize, usize> = HashMap::new();
    let mut n_on = 0usize;
    for (&p, &l) in present.iter().zip(labels) {
        *all.entry(l).or_insert(0) += 1;
        if p {
            *on.entry(l).or_insert(0) += 1;
            n_on += 1;
        } else {
            *off.entry(l).or_insert(0) += 1;
        }
    }
    let n_off = total - n_on;
    let h = entropy(&all, total);
    let cond = (n_on as f64 / total as f64) * entropy(&on, n_on)
        + (n_off as f64 / total as f64) * entropy(&off, n_off);
    // Clamp the subtraction noise so constant features are exactly zero.
    (h - cond).max(0.0)
}

/// Information gain of splitting the labels on feature presence
/// (count > 0), in bits.
pub fn information_gain(dataset: &[(Vec<u64>, usize)], column: usize) -> Result<f64> {
    let labels: Vec<usize> = dataset.iter().map(|(_, l)| *l).collect();
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(FeatureError::DegenerateDataset);
    }
    let present: Vec<bool> = dataset.iter().map(|(v, _)| v[column] > 0).collect();
    Ok(presence_gain(&present, &labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionPolicy {
    /// Keep every feature with strictly positive gain, capped.
    PositiveGain { cap: usize },
    /// Keep the k best by gain regardless of sign.
    TopK(usize),
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::PositiveGain { cap: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEntry {
    pub key: FeatureKey,
    pub gain: f64,
}

/// Ordered feature columns plus a content hash. The column index of an
/// entry is its position.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub entries: Vec<FeatureEntry>,
    pub version: String,
    index: HashMap<FeatureKey, usize>,
}

impl FeatureTable {
    fn build(entries: Vec<FeatureEntry>) -> Self {
        let mut body = String::new();
        for e in &entries {
            body.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.key.extractor, e.key.group, e.gain, e.key.text
            ));
        }
        let version = hex::encode(Sha256::digest(body.as_bytes()));
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.key.clone(), i))
            .collect();
        FeatureTable {
            entries,
            version,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn column_of(&self, key: &FeatureKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key_of(&self, column: usize) -> &FeatureKey {
        &self.entries[column].key
    }

    /// Project extracted counts onto the table's columns; features outside
    /// the table are dropped.
    pub fn vectorize(&self, counts: &BTreeMap<FeatureKey, u64>, id: impl Into<String>) -> FeatureVector {
        let mut v = vec![0u64; self.entries.len()];
        for (key, &count) in counts {
            if let Some(col) = self.column_of(key) {
                v[col] = count;
            }
        }
        FeatureVector {
            id: id.into(),
            counts: v,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.key.extractor, e.key.group, e.gain, e.key.text
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<FeatureTable> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut f = line.splitn(4, '\t');
            let bad = |msg: &str| FeatureError::MalformedTable(lineno + 1, msg.into());
            let extractor = f
                .next()
                .ok_or_else(|| bad("missing extractor"))?
                .parse::<Extractor>()
                .map_err(|e| bad(&e))?;
            let group = f
                .next()
                .ok_or_else(|| bad("missing group"))?
                .parse::<Group>()
                .map_err(|e| bad(&e))?;
            let gain: f64 = f
                .next()
                .ok_or_else(|| bad("missing gain"))?
                .parse()
                .map_err(|_| bad("gain is not a number"))?;
            let text = f.next().ok_or_else(|| bad("missing feature text"))?;
            entries.push(FeatureEntry {
                key: FeatureKey {
                    extractor,
                    group,
                    text: text.to_string(),
                },
                gain,
            });
        }
        Ok(FeatureTable::build(entries))
    }
}

/// Feature counts for one binary, aligned to a table's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub counts: Vec<u64>,
}

impl FeatureVector {
    pub fn to_tsv_line(&self) -> String {
        let counts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        format!("{}\t{}", self.id, counts.join(","))
    }

    pub fn from_tsv_line(line: &str) -> Result<FeatureVector> {
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| FeatureError::MalformedTable(1, "missing tab".into()))?;
        let counts = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|c| {
                    c.parse::<u64>()
                        .map_err(|_| FeatureError::MalformedTable(1, format!("bad count {c:?}")))
                })
                .collect::<Result<Vec<u64>>>()?
        };
        Ok(FeatureVector {
            id: id.to_string(),
            counts,
        })
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Rank the union of observed features by information gain and freeze the
/// survivors into a table. Ordering is (gain desc, text asc), so equal
/// datasets always produce identical tables.
pub fn select_features(
    samples: &[(BTreeMap<FeatureKey, u64>, usize)],
    policy: SelectionPolicy,
) -> Result<FeatureTable> {
    let labels: Vec<usize> = samples.iter().map(|(_, l)| *l).collect();
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(FeatureError::DegenerateDataset);
    }
    let candidates: BTreeSet<&FeatureKey> = samples.iter().flat_map(|(m, _)| m.keys()).collect();
    let mut scored: Vec<FeatureEntry> = candidates
        .into_iter()
        .map(|key| {
            let present: Vec<bool> = samples
                .iter()
                .map(|(m, _)| m.get(key).copied().unwrap_or(0) > 0)
                .collect();
            FeatureEntry {
                key: key.clone(),
                gain: presence_gain(&present, &labels),
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.gain
            .partial_cmp(&a.gain)
            .unwrap()
            .then_with(|| a.key.text.cmp(&b.key.text))
            .then_with(|| a.key.cmp(&b.key))
    });
    let kept: Vec<FeatureEntry> = match policy {
        SelectionPolicy::PositiveGain { cap } => scored
            .into_iter()
            .filter(|e| e.gain > 0.0)
            .take(cap)
            .collect(),
        SelectionPolicy::TopK(k) => scored.into_iter().take(k).collect(),
    };
    Ok(FeatureTable::build(kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;
    use std::process::Command;

    #[test]
    fn normalize_spec_examples() {
        assert_eq!(
            normalize_tokens("imul ebp,[fs:rsi+0x2e],dword 0x70706"),
            "imul ebp,[fs:rsi+hexadecimal],dword hexadecimal"
        );
        assert_eq!(normalize_tokens("ret"), "ret");
        assert_eq!(normalize_tokens("mov eax, 42"), "mov eax, number");
    }

    #[test]
    fn normalize_preserves_hexlike_mnemonics_and_signs() {
        assert_eq!(normalize_tokens("add eax,ebx"), "add eax,ebx");
        assert_eq!(normalize_tokens("dec eax"), "dec eax");
        assert_eq!(normalize_tokens("db 0xf"), "db hexadecimal");
        assert_eq!(
            normalize_tokens("mov rax,[rbp-0x18]"),
            "mov rax,[rbp-hexadecimal]"
        );
        assert_eq!(
            normalize_tokens("lea rax,[rbp+rcx*4+0x0]"),
            "lea rax,[rbp+rcx*number+hexadecimal]"
        );
        // Segment boundaries reset the mnemonic position.
        assert_eq!(
            normalize_tokens("push rax; add eax,1"),
            "push rax; add eax,number"
        );
    }

    fn compile(src: &str, flags: &[&str]) -> (tempfile::TempDir, ElfImage) {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("t.c");
        std::fs::File::create(&c)
            .unwrap()
            .write_all(src.as_bytes())
            .unwrap();
        let bin = dir.path().join("t");
        let out = Command::new("gcc")
            .args(flags)
            .arg("-o")
            .arg(&bin)
            .arg(&c)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let image = ElfImage::parse(&std::fs::read(&bin).unwrap()).unwrap();
        (dir, image)
    }

    #[test]
    fn push_pair_yields_unigrams_and_bigram() {
        let (_dir, image) = compile(
            r#"
            int main(void) {
                __asm__ volatile("push %rax\n\tpush %rbx\n\tpop %rbx\n\tpop %rax");
                return 0;
            }
            "#,
            &["-O0"],
        );
        let counts = extract(&image);
        let uni_a = counts.get(&FeatureKey::code("push rax")).copied().unwrap_or(0);
        let uni_b = counts.get(&FeatureKey::code("push rbx")).copied().unwrap_or(0);
        let bi = counts
            .get(&FeatureKey::code("push rax; push rbx"))
            .copied()
            .unwrap_or(0);
        assert!(uni_a >= 1 && uni_b >= 1, "unigrams missing: {uni_a} {uni_b}");
        assert!(bi >= 1, "bigram missing");
        assert!(bi <= uni_a.min(uni_b), "containment violated");
    }

    #[test]
    fn call_produces_three_feature_kinds() {
        let (_dir, image) = compile(
            r#"
            #include <stdio.h>
            int main(void) {
                fprintf(stderr, "W: %d\n", 7);
                return 0;
            }
            "#,
            &["-O0"],
        );
        let counts = extract(&image);
        assert!(
            counts.get(&FeatureKey::linear("call hexadecimal")).copied().unwrap_or(0) > 0,
            "LINEAR call feature missing"
        );
        assert!(
            counts.get(&FeatureKey::code("call fprintf")).copied().unwrap_or(0) > 0,
            "CODE named-call feature missing: {:?}",
            counts
                .keys()
                .filter(|k| k.group == Group::CodeInstr && k.text.starts_with("call "))
                .collect::<Vec<_>>()
        );
        assert!(
            counts.get(&FeatureKey::annot("fprintf")).copied().unwrap_or(0) > 0,
            "CODE_ANNOT fprintf missing"
        );
    }

    #[test]
    fn bigram_counts_bounded_by_unigrams_everywhere() {
        let (_dir, image) = compile("int main(void){return 12;}", &["-O0"]);
        let counts = extract(&image);
        for (key, &n) in &counts {
            if key.group == Group::CodeAnnot || !key.text.contains("; ") {
                continue;
            }
            let (a, b) = key.text.split_once("; ").unwrap();
            let ka = FeatureKey {
                extractor: key.extractor,
                group: key.group,
                text: a.to_string(),
            };
            let kb = FeatureKey {
                extractor: key.extractor,
                group: key.group,
                text: b.to_string(),
            };
            let ca = counts.get(&ka).copied().unwrap_or(0);
            let cb = counts.get(&kb).copied().unwrap_or(0);
            assert!(
                n <= ca.min(cb),
                "bigram {:?} count {n} exceeds unigrams {ca}/{cb}",
                key.text
            );
        }
    }

    #[test]
    fn non_loadable_section_leaves_code_features_alone() {
        let (_dir, mut image) = compile("int main(void){return 3;}", &["-O0"]);
        let before = extract(&image);
        image
            .add_section(crate::elf::NewSection {
                name: ".note.padding".into(),
                sh_type: 1,
                flags: 0,
                addralign: 1,
                entsize: 0,
                data: vec![0x90; 64],
                reserve_extra: 0,
            })
            .unwrap();
        let after = extract(&image);
        let code_only = |m: &BTreeMap<FeatureKey, u64>| -> BTreeMap<FeatureKey, u64> {
            m.iter()
                .filter(|(k, _)| k.extractor == Extractor::Code)
                .map(|(k, v)| (k.clone(), *v))
                .collect()
        };
        assert_eq!(code_only(&before), code_only(&after));
        assert_ne!(
            before.get(&FeatureKey::linear("nop")),
            after.get(&FeatureKey::linear("nop")),
            "added nop bytes should surface as LINEAR features"
        );
    }

    #[test]
    fn gain_perfect_predictor_is_one_bit() {
        let dataset = vec![
            (vec![3u64], 0usize),
            (vec![1], 0),
            (vec![0], 1),
            (vec![0], 1),
        ];
        assert_eq!(information_gain(&dataset, 0).unwrap(), 1.0);
    }

    #[test]
    fn gain_constant_feature_is_zero() {
        let dataset = vec![
            (vec![2u64], 0usize),
            (vec![2], 0),
            (vec![2], 1),
            (vec![2], 1),
        ];
        assert_eq!(information_gain(&dataset, 0).unwrap(), 0.0);
    }

    #[test]
    fn gain_matches_hand_computation() {
        // labels A,A,B,B; present on samples 0,2,3.
        // H = 1; H|split = 3/4 * H(1/3,2/3) = 0.75 * 0.9182958340544896.
        let dataset = vec![
            (vec![1u64], 0usize),
            (vec![0], 0),
            (vec![5], 1),
            (vec![2], 1),
        ];
        let gain = information_gain(&dataset, 0).unwrap();
        assert!((gain - 0.311_278_124_459_132_8).abs() < 1e-12, "gain {gain}");
    }

    #[test]
    fn gain_rejects_single_label() {
        let dataset = vec![(vec![1u64], 0usize), (vec![0], 0)];
        assert_eq!(
            information_gain(&dataset, 0),
            Err(FeatureError::DegenerateDataset)
        );
    }

    fn sample(pairs: &[(&str, u64)], label: usize) -> (BTreeMap<FeatureKey, u64>, usize) {
        (
            pairs
                .iter()
                .map(|(t, n)| (FeatureKey::code(*t), *n))
                .collect(),
            label,
        )
    }

    #[test]
    fn selection_keeps_only_positive_gain() {
        // "signal" separates labels; "noise" is present everywhere.
        let samples = vec![
            sample(&[("signal", 2), ("noise", 1)], 0),
            sample(&[("signal", 1), ("noise", 3)], 0),
            sample(&[("noise", 2)], 1),
            sample(&[("noise", 1), ("other", 1)], 1),
        ];
        let table = select_features(&samples, SelectionPolicy::default()).unwrap();
        let texts: Vec<&str> = table.entries.iter().map(|e| e.key.text.as_str()).collect();
        assert!(texts.contains(&"signal"));
        assert!(!texts.contains(&"noise"), "zero-gain feature kept: {texts:?}");
        for e in &table.entries {
            assert!(e.gain > 0.0);
        }
    }

    #[test]
    fn selection_order_and_cap() {
        let samples = vec![
            sample(&[("a", 1), ("b", 1), ("zz", 1)], 0),
            sample(&[("a", 1), ("b", 1)], 0),
            sample(&[("c", 1)], 1),
            sample(&[("c", 1), ("zz", 1)], 1),
        ];
        // a, b, c are perfect predictors (gain 1); zz has lower gain.
        let table = select_features(&samples, SelectionPolicy::PositiveGain { cap: 3 }).unwrap();
        let texts: Vec<&str> = table.entries.iter().map(|e| e.key.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "b", "c"], "expected gain-desc then text-asc");
        for (i, e) in table.entries.iter().enumerate() {
            assert_eq!(table.column_of(&e.key), Some(i));
        }
    }

    #[test]
    fn topk_clamps_to_candidate_count() {
        let samples = vec![sample(&[("a", 1)], 0), sample(&[("b", 2)], 1)];
        let table = select_features(&samples, SelectionPolicy::TopK(50)).unwrap();
        assert_eq!(table.len(), 2);
    }

    #[test]
    fn table_roundtrips_through_tsv() {
        let samples = vec![
            sample(&[("push rax; push rbx", 2), ("lea rax,[rip+hexadecimal]", 1)], 0),
            sample(&[("push rax; push rbx", 1)], 0),
            sample(&[("mov eax,number", 4)], 1),
            sample(&[("mov eax,number", 1), ("lea rax,[rip+hexadecimal]", 2)], 1),
        ];
        let table = select_features(&samples, SelectionPolicy::default()).unwrap();
        let reloaded = FeatureTable::from_tsv(&table.to_tsv()).unwrap();
        assert_eq!(table.entries, reloaded.entries);
        assert_eq!(table.version, reloaded.version);
    }

    #[test]
    fn vector_roundtrips_through_tsv() {
        let v = FeatureVector {
            id: "bins/a.bin".into(),
            counts: vec![0, 3, 12, 0, 1],
        };
        assert_eq!(FeatureVector::from_tsv_line(&v.to_tsv_line()).unwrap(), v);
    }

    #[test]
    fn vectorize_projects_and_pads() {
        let samples = vec![sample(&[("a", 1)], 0), sample(&[("b", 2)], 1)];
        let table = select_features(&samples, SelectionPolicy::default()).unwrap();
        let mut counts = BTreeMap::new();
        counts.insert(FeatureKey::code("a"), 7u64);
        counts.insert(FeatureKey::code("unknown"), 9);
        let v = table.vectorize(&counts, "x");
        assert_eq!(v.counts.len(), table.len());
        let col_a = table.column_of(&FeatureKey::code("a")).unwrap();
        assert_eq!(v.counts[col_a], 7);
        assert_eq!(v.counts.iter().sum::<u64>(), 7, "unknown feature leaked in");
    }
}
