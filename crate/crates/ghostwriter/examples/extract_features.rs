//! Extract stylistic features from a real ELF binary and print a summary.
//!
//! Usage: cargo run --example extract_features -- <path-to-elf>

use std::collections::BTreeMap;

use ghostwriter::features::{self, Group};
use ghostwriter::ElfImage;

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/usr/bin/ls".to_string());
    let bytes = std::fs::read(&path).unwrap_or_else(|e| panic!("read {path}: {e}"));
    let image = ElfImage::parse(&bytes).unwrap_or_else(|e| panic!("parse {path}: {e}"));

    let extraction = features::extract_detailed(&image);
    println!(
        "{path}: {} distinct features, {} total occurrences",
        extraction.counts.len(),
        extraction.counts.values().sum::<u64>()
    );

    let mut by_group: BTreeMap<Group, (usize, u64)> = BTreeMap::new();
    for (key, &count) in &extraction.counts {
        let slot = by_group.entry(key.group).or_default();
        slot.0 += 1;
        slot.1 += count;
    }
    for (group, (distinct, total)) in &by_group {
        println!("  {group}: {distinct} distinct, {total} occurrences");
    }

    println!("\nmost frequent per group:");
    for wanted in [Group::LinearInstr, Group::CodeInstr, Group::CodeAnnot] {
        let top = extraction
            .counts
            .iter()
            .filter(|(k, _)| k.group == wanted)
            .max_by_key(|(k, &c)| (c, std::cmp::Reverse(k.text.clone())));
        if let Some((key, count)) = top {
            let site = extraction.sites[key][0];
            println!(
                "  {wanted}  {:40}  x{count}  (first at vaddr {:#x})",
                format!("{:?}", key.text),
                site.vaddr
            );
        }
    }
}
