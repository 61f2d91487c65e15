//! The 27-class COCO-Stuff label space: 12 thing and 15 stuff supercategories
//! and the fine-to-coarse merge table.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{ClassKind, ClassSplit};

/// Number of fine labels in the stuff+thing maps (ids 0..=181).
pub const FINE_CLASSES: usize = 182;
pub const COARSE_CLASSES: usize = 27;

pub const COARSE_NAMES: [(&str, ClassKind); COARSE_CLASSES] = [
    ("electronic", ClassKind::Thing),
    ("appliance", ClassKind::Thing),
    ("food-things", ClassKind::Thing),
    ("furniture-things", ClassKind::Thing),
    ("indoor", ClassKind::Thing),
    ("kitchen", ClassKind::Thing),
    ("accessory", ClassKind::Thing),
    ("animal", ClassKind::Thing),
    ("outdoor", ClassKind::Thing),
    ("person", ClassKind::Thing),
    ("sports", ClassKind::Thing),
    ("vehicle", ClassKind::Thing),
    ("ceiling", ClassKind::Stuff),
    ("floor", ClassKind::Stuff),
    ("food-stuff", ClassKind::Stuff),
    ("furniture-stuff", ClassKind::Stuff),
    ("raw-material", ClassKind::Stuff),
    ("textile", ClassKind::Stuff),
    ("wall", ClassKind::Stuff),
    ("window", ClassKind::Stuff),
    ("building", ClassKind::Stuff),
    ("ground", ClassKind::Stuff),
    ("plant", ClassKind::Stuff),
    ("sky", ClassKind::Stuff),
    ("solid", ClassKind::Stuff),
    ("structural", ClassKind::Stuff),
    ("water", ClassKind::Stuff),
];

/// Shipped merge table, one `fine coarse` pair per line.
pub const DEFAULT_MERGE_TABLE: &str = include_str!("../../data/coco_stuff_27.txt");

pub fn class_split() -> ClassSplit {
    let mut split = ClassSplit::default();
    for (id, (name, kind)) in COARSE_NAMES.iter().enumerate() {
        split.classes.insert(id as u32, (name.to_string(), *kind));
    }
    split
}

/// Fine id -> coarse id; `None` for fine ids the table leaves out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    map: Vec<Option<u32>>,
}

impl MergeTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = vec![None; FINE_CLASSES];
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("merge table line {}: '{line}'", n + 1));
            let mut parts = line.split_whitespace();
            let fine: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let coarse: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() || coarse as usize >= COARSE_CLASSES {
                return Err(bad());
            }
            if fine >= map.len() {
                map.resize(fine + 1, None);
            }
            map[fine] = Some(coarse);
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_MERGE_TABLE).expect("shipped merge table parses")
    }

    pub fn coarse(&self, fine: u32) -> Option<u32> {
        self.map.get(fine as usize).copied().flatten()
    }

    /// Fine ids with an entry.
    pub fn covered(&self) -> impl Iterator<Item = u32> + '_ {
        self.map.iter().enumerate().filter_map(|(i, c)| c.map(|_| i as u32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_has_fifteen_stuff_and_twelve_things() {
        let split = class_split();
        assert_eq!(split.classes.len(), 27);
        let stuff = split.classes.values().filter(|(_, k)| *k == ClassKind::Stuff).count();
        assert_eq!(stuff, 15);
        assert_eq!(27 - stuff, 12);
    }

    #[test]
    fn shipped_table_is_total_and_onto() {
        let t = MergeTable::shipped();
        assert_eq!(t.covered().count(), FINE_CLASSES);
        let mut hit = [false; COARSE_CLASSES];
        for f in 0..FINE_CLASSES as u32 {
            hit[t.coarse(f).unwrap() as usize] = true;
        }
        assert!(hit.iter().all(|&h| h));
        // thing fine ids (0..=90) land on thing classes, the rest on stuff
        for f in 0..FINE_CLASSES as u32 {
            let kind = COARSE_NAMES[t.coarse(f).unwrap() as usize].1;
            assert_eq!(kind == ClassKind::Thing, f <= 90, "fine id {f}");
        }
        assert_eq!(t.coarse(0), Some(9)); // person
        assert_eq!(t.coarse(156), Some(23)); // sky
        assert_eq!(t.coarse(255), None);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(MergeTable::parse("1 2 3").is_err());
        assert!(MergeTable::parse("1 27").is_err());
        assert!(MergeTable::parse("x 1").is_err());
    }
}
