//! Per-application four-level radix page table.
//!
//! Every node has `slots_per_large_frame` entries (512 at 4KB/2MB), so the
//! penultimate level indexes exactly one large frame. A coalesced region is
//! recorded on that penultimate entry; the 512 leaf entries underneath are
//! kept intact (shadowed) so splintering is a pure metadata flip.
//!
//! Each table carries a flat `vpage -> ppage` mirror that is updated through
//! a separate code path and is used to cross-check every radix walk.

use std::fmt::Write as _;

use rustc_hash::FxHashMap;

use crate::error::PageTableError;
use crate::geometry::{Asid, FrameNum, PageGeometry, PageNum, PhysAddr, VirtAddr};

/// Radix depth for a base-page translation.
pub const BASE_WALK_LEVELS: u32 = 4;
/// Radix depth for a coalesced (large-page) translation.
pub const LARGE_WALK_LEVELS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PageSize {
    Base,
    Large,
}

impl PageSize {
    pub fn label(self) -> &'static str {
        match self {
            PageSize::Base => "4K",
            PageSize::Large => "2M",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pte {
    Empty,
    Next { node: u32, large: Option<FrameNum> },
    Leaf(PageNum),
}

/// Result of a functional radix walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkOutcome {
    /// `None` means the walk hit a non-present entry (page fault).
    pub translation: Option<Translation>,
    /// Number of table levels touched before resolving or faulting.
    pub levels: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub ppage: PageNum,
    pub size: PageSize,
}

/// Flat `(asid, vpage) -> ppage` map used as the translation oracle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlatOracle {
    map: FxHashMap<(Asid, PageNum), PageNum>,
}

impl FlatOracle {
    pub fn insert(&mut self, asid: Asid, vpage: PageNum, ppage: PageNum) {
        self.map.insert((asid, vpage), ppage);
    }

    pub fn remove(&mut self, asid: Asid, vpage: PageNum) -> Option<PageNum> {
        self.map.remove(&(asid, vpage))
    }

    pub fn get(&self, asid: Asid, vpage: PageNum) -> Option<PageNum> {
        self.map.get(&(asid, vpage)).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageTable {
    asid: Asid,
    geometry: PageGeometry,
    fanout_bits: u32,
    nodes: Vec<Vec<Pte>>,
    /// Non-empty entries per node; empty tables below the root are recycled.
    used: Vec<u32>,
    free: Vec<u32>,
    mapped: u64,
    oracle: FlatOracle,
}

impl PageTable {
    pub fn new(asid: Asid, geometry: PageGeometry) -> Self {
        let fanout = geometry.slots_per_large_frame();
        let fanout_bits = fanout.trailing_zeros();
        Self {
            asid,
            geometry,
            fanout_bits,
            nodes: vec![vec![Pte::Empty; fanout as usize]],
            used: vec![0],
            free: Vec::new(),
            mapped: 0,
            oracle: FlatOracle::default(),
        }
    }

    pub fn asid(&self) -> Asid {
        self.asid
    }

    pub fn geometry(&self) -> PageGeometry {
        self.geometry
    }

    /// Number of valid base mappings.
    pub fn mapped_pages(&self) -> u64 {
        self.mapped
    }

    pub fn oracle(&self) -> &FlatOracle {
        &self.oracle
    }

    #[inline]
    fn index(&self, vpage: PageNum, level: u32) -> usize {
        // level 3 = root, level 0 = leaf table
        let mask = (1u64 << self.fanout_bits) - 1;
        ((vpage >> (self.fanout_bits * level)) & mask) as usize
    }

    /// Node index of the leaf table covering `vpage`, plus the parent slot
    /// (node, index) holding the penultimate entry. Creates nodes when
    /// `create` is set.
    fn leaf_table(&mut self, vpage: PageNum, create: bool) -> Option<(usize, (usize, usize))> {
        let mut node = 0usize;
        for level in (1..BASE_WALK_LEVELS).rev() {
            let idx = self.index(vpage, level);
            match self.nodes[node][idx] {
                Pte::Next { node: next, .. } => {
                    if level == 1 {
                        return Some((next as usize, (node, idx)));
                    }
                    node = next as usize;
                }
                Pte::Empty if create => {
                    let fresh = match self.free.pop() {
                        Some(f) => f as usize,
                        None => {
                            self.nodes.push(vec![Pte::Empty; 1usize << self.fanout_bits]);
                            self.used.push(0);
                            self.nodes.len() - 1
                        }
                    };
                    self.used[node] += 1;
                    self.nodes[node][idx] = Pte::Next {
                        node: fresh as u32,
                        large: None,
                    };
                    if level == 1 {
                        return Some((fresh, (node, idx)));
                    }
                    node = fresh;
                }
                _ => return None,
            }
        }
        unreachable!("loop always returns at level 1")
    }

    /// Unlinks the now-empty tables on the path to `vpage`, bottom up.
    fn prune(&mut self, vpage: PageNum) {
        let mut path = Vec::with_capacity(BASE_WALK_LEVELS as usize);
        let mut node = 0usize;
        for level in (1..BASE_WALK_LEVELS).rev() {
            let idx = self.index(vpage, level);
            match self.nodes[node][idx] {
                Pte::Next { node: next, .. } => {
                    path.push((node, idx));
                    node = next as usize;
                }
                _ => return,
            }
        }
        for &(parent, idx) in path.iter().rev() {
            let Pte::Next { node: child, large } = self.nodes[parent][idx] else { return };
            if self.used[child as usize] != 0 || large.is_some() {
                return;
            }
            self.nodes[parent][idx] = Pte::Empty;
            self.used[parent] -= 1;
            self.free.push(child);
        }
    }

    /// Tables currently linked into the tree, root included.
    pub fn live_nodes(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    fn penultimate(&self, vpage: PageNum) -> Option<Pte> {
        let mut node = 0usize;
        for level in (1..BASE_WALK_LEVELS).rev() {
            let pte = self.nodes[node][self.index(vpage, level)];
            match pte {
                Pte::Next { node: next, .. } => {
                    if level == 1 {
                        return Some(pte);
                    }
                    node = next as usize;
                }
                _ => return None,
            }
        }
        None
    }

    pub fn is_coalesced(&self, vframe: FrameNum) -> bool {
        let vpage = self.geometry.first_page_of_frame(vframe);
        matches!(
            self.penultimate(vpage),
            Some(Pte::Next { large: Some(_), .. })
        )
    }

    pub fn map_base(&mut self, vpage: PageNum, ppage: PageNum) -> Result<(), PageTableError> {
        let vframe = self.geometry.frame_of_page(vpage);
        let idx = self.index(vpage, 0);
        let (leaf, (pn, pi)) = self.leaf_table(vpage, true).expect("created on demand");
        if let Pte::Next { large: Some(_), .. } = self.nodes[pn][pi] {
            return Err(PageTableError::InsideCoalesced { vpage, vframe });
        }
        if let Pte::Leaf(_) = self.nodes[leaf][idx] {
            return Err(PageTableError::AlreadyMapped { vpage });
        }
        self.nodes[leaf][idx] = Pte::Leaf(ppage);
        self.used[leaf] += 1;
        self.mapped += 1;
        self.oracle.insert(self.asid, vpage, ppage);
        Ok(())
    }

    pub fn unmap_base(&mut self, vpage: PageNum) -> Result<PageNum, PageTableError> {
        let vframe = self.geometry.frame_of_page(vpage);
        let idx = self.index(vpage, 0);
        let Some((leaf, (pn, pi))) = self.leaf_table(vpage, false) else {
            return Err(PageTableError::NotMapped { vpage });
        };
        if let Pte::Next { large: Some(_), .. } = self.nodes[pn][pi] {
            return Err(PageTableError::InsideCoalesced { vpage, vframe });
        }
        match self.nodes[leaf][idx] {
            Pte::Leaf(ppage) => {
                self.nodes[leaf][idx] = Pte::Empty;
                self.used[leaf] -= 1;
                self.mapped -= 1;
                self.oracle.remove(self.asid, vpage);
                if self.used[leaf] == 0 {
                    self.prune(vpage);
                }
                Ok(ppage)
            }
            _ => Err(PageTableError::NotMapped { vpage }),
        }
    }

    /// True iff every base page of `vframe` is mapped, without a large
    /// mapping, to the same slot of `pframe`.
    pub fn maps_frame_in_place(&self, vframe: FrameNum, pframe: FrameNum) -> bool {
        let first = self.geometry.first_page_of_frame(vframe);
        let pfirst = self.geometry.first_page_of_frame(pframe);
        match self.penultimate(first) {
            Some(Pte::Next { node, large: None }) => self.nodes[node as usize]
                .iter()
                .enumerate()
                .all(|(i, pte)| matches!(*pte, Pte::Leaf(p) if p == pfirst + i as u64)),
            _ => false,
        }
    }

    /// Points an existing base mapping at a new physical page (migration).
    pub fn remap_base(&mut self, vpage: PageNum, ppage: PageNum) -> Result<PageNum, PageTableError> {
        let vframe = self.geometry.frame_of_page(vpage);
        let idx = self.index(vpage, 0);
        let Some((leaf, (pn, pi))) = self.leaf_table(vpage, false) else {
            return Err(PageTableError::NotMapped { vpage });
        };
        if let Pte::Next { large: Some(_), .. } = self.nodes[pn][pi] {
            return Err(PageTableError::InsideCoalesced { vpage, vframe });
        }
        match self.nodes[leaf][idx] {
            Pte::Leaf(old) => {
                self.nodes[leaf][idx] = Pte::Leaf(ppage);
                self.oracle.insert(self.asid, vpage, ppage);
                Ok(old)
            }
            _ => Err(PageTableError::NotMapped { vpage }),
        }
    }

    /// Marks `vframe` as a large mapping onto `pframe`. Every one of the
    /// frame's base pages must already be mapped to the matching slot.
    pub fn set_coalesced(&mut self, vframe: FrameNum, pframe: FrameNum) -> Result<(), PageTableError> {
        let first = self.geometry.first_page_of_frame(vframe);
        let pfirst = self.geometry.first_page_of_frame(pframe);
        let Some((leaf, (pn, pi))) = self.leaf_table(first, false) else {
            return Err(PageTableError::NotCoalescible {
                vframe,
                reason: "no base pages mapped".into(),
            });
        };
        if let Pte::Next { large: Some(_), .. } = self.nodes[pn][pi] {
            return Err(PageTableError::NotCoalescible {
                vframe,
                reason: "already coalesced".into(),
            });
        }
        for (slot, pte) in self.nodes[leaf].iter().enumerate() {
            match *pte {
                Pte::Leaf(p) if p == pfirst + slot as u64 => {}
                Pte::Leaf(p) => {
                    return Err(PageTableError::NotCoalescible {
                        vframe,
                        reason: format!("slot {slot} maps to {p:#x}, not {:#x}", pfirst + slot as u64),
                    })
                }
                _ => {
                    return Err(PageTableError::NotCoalescible {
                        vframe,
                        reason: format!("slot {slot} is unmapped"),
                    })
                }
            }
        }
        if let Pte::Next { large, .. } = &mut self.nodes[pn][pi] {
            *large = Some(pframe);
        }
        Ok(())
    }

    pub fn clear_coalesced(&mut self, vframe: FrameNum) -> Result<FrameNum, PageTableError> {
        let first = self.geometry.first_page_of_frame(vframe);
        let Some((_, (pn, pi))) = self.leaf_table(first, false) else {
            return Err(PageTableError::NotCoalesced { vframe });
        };
        match &mut self.nodes[pn][pi] {
            Pte::Next { large, .. } if large.is_some() => Ok(large.take().unwrap()),
            _ => Err(PageTableError::NotCoalesced { vframe }),
        }
    }

    /// Functional radix walk of a virtual page.
    pub fn walk_page(&self, vpage: PageNum) -> WalkOutcome {
        let mut node = 0usize;
        let mut levels = 0;
        for level in (0..BASE_WALK_LEVELS).rev() {
            levels += 1;
            match self.nodes[node][self.index(vpage, level)] {
                Pte::Next {
                    large: Some(pframe),
                    ..
                } => {
                    let ppage = self.geometry.first_page_of_frame(pframe)
                        + self.geometry.slot_of_page(vpage);
                    return WalkOutcome {
                        translation: Some(Translation {
                            ppage,
                            size: PageSize::Large,
                        }),
                        levels,
                    };
                }
                Pte::Next { node: next, .. } => node = next as usize,
                Pte::Leaf(ppage) => {
                    return WalkOutcome {
                        translation: Some(Translation {
                            ppage,
                            size: PageSize::Base,
                        }),
                        levels,
                    }
                }
                Pte::Empty => break,
            }
        }
        WalkOutcome {
            translation: None,
            levels,
        }
    }

    pub fn walk(&self, vaddr: VirtAddr) -> WalkOutcome {
        self.walk_page(self.geometry.base_page_of(vaddr))
    }

    pub fn translate(&self, vaddr: VirtAddr) -> Option<PhysAddr> {
        let t = self.walk(vaddr).translation?;
        Some(PhysAddr(
            t.ppage * self.geometry.base_page_bytes + self.geometry.page_offset(vaddr),
        ))
    }

    /// Compares the radix walk against the flat oracle for one page.
    pub fn agrees_with_oracle(&self, vpage: PageNum) -> bool {
        self.walk_page(vpage).translation.map(|t| t.ppage) == self.oracle.get(self.asid, vpage)
    }

    /// All valid base mappings in ascending virtual order.
    pub fn mappings(&self) -> Vec<(PageNum, PageNum)> {
        let mut out = Vec::with_capacity(self.mapped as usize);
        self.collect(0, BASE_WALK_LEVELS - 1, 0, &mut out);
        out
    }

    fn collect(&self, node: usize, level: u32, prefix: u64, out: &mut Vec<(PageNum, PageNum)>) {
        for (i, pte) in self.nodes[node].iter().enumerate() {
            let vp = (prefix << self.fanout_bits) | i as u64;
            match *pte {
                Pte::Next { node: next, .. } => self.collect(next as usize, level - 1, vp, out),
                Pte::Leaf(p) => out.push((vp, p)),
                Pte::Empty => {}
            }
        }
    }

    /// Virtual frames currently marked coalesced, ascending.
    pub fn coalesced_frames(&self) -> Vec<(FrameNum, FrameNum)> {
        let mut out = Vec::new();
        self.collect_large(0, BASE_WALK_LEVELS - 1, 0, &mut out);
        out
    }

    fn collect_large(&self, node: usize, level: u32, prefix: u64, out: &mut Vec<(FrameNum, FrameNum)>) {
        for (i, pte) in self.nodes[node].iter().enumerate() {
            if let Pte::Next { node: next, large } = *pte {
                let vp = (prefix << self.fanout_bits) | i as u64;
                if level == 1 {
                    if let Some(pf) = large {
                        out.push((vp, pf));
                    }
                } else {
                    self.collect_large(next as usize, level - 1, vp, out);
                }
            }
        }
    }

    /// Ordered text dump: `asid vpage ppage size` per mapping, with a
    /// coalesced region listed once as a large mapping.
    pub fn dump(&self) -> String {
        let large: FxHashMap<FrameNum, FrameNum> = self.coalesced_frames().into_iter().collect();
        let mut out = String::new();
        let mut emitted_large = None;
        for (vp, pp) in self.mappings() {
            let vf = self.geometry.frame_of_page(vp);
            if let Some(pf) = large.get(&vf) {
                if emitted_large != Some(vf) {
                    emitted_large = Some(vf);
                    let _ = writeln!(
                        out,
                        "{} {:#x} {:#x} {}",
                        self.asid,
                        self.geometry.first_page_of_frame(vf),
                        self.geometry.first_page_of_frame(*pf),
                        PageSize::Large.label()
                    );
                }
                continue;
            }
            let _ = writeln!(out, "{} {:#x} {:#x} {}", self.asid, vp, pp, PageSize::Base.label());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn table() -> PageTable {
        PageTable::new(Asid(1), PageGeometry::default())
    }

    fn map_frame(pt: &mut PageTable, vframe: u64, pframe: u64) {
        for s in 0..512 {
            pt.map_base(vframe * 512 + s, pframe * 512 + s).unwrap();
        }
    }

    #[test]
    fn map_then_walk() {
        let mut pt = table();
        pt.map_base(0, 7).unwrap();
        let w = pt.walk_page(0);
        assert_eq!(w.translation.unwrap().ppage, 7);
        assert_eq!(w.levels, 4);
    }

    #[test]
    fn double_map_is_rejected() {
        let mut pt = table();
        pt.map_base(0, 7).unwrap();
        assert_eq!(pt.map_base(0, 8), Err(PageTableError::AlreadyMapped { vpage: 0 }));
        assert_eq!(pt.walk_page(0).translation.unwrap().ppage, 7);
    }

    #[test]
    fn unmap_clears_and_unknown_unmap_errors() {
        let mut pt = table();
        pt.map_base(3, 9).unwrap();
        assert_eq!(pt.unmap_base(3), Ok(9));
        assert!(pt.walk_page(3).translation.is_none());
        assert_eq!(pt.unmap_base(3), Err(PageTableError::NotMapped { vpage: 3 }));
        assert_eq!(pt.unmap_base(1 << 30), Err(PageTableError::NotMapped { vpage: 1 << 30 }));
    }

    #[test]
    fn remap_moves_a_mapping_in_place() {
        let mut pt = table();
        pt.map_base(12, 40).unwrap();
        assert_eq!(pt.remap_base(12, 77), Ok(40));
        assert_eq!(pt.walk_page(12).translation.unwrap().ppage, 77);
        assert!(pt.agrees_with_oracle(12));
        assert_eq!(pt.mapped_pages(), 1);
        assert_eq!(pt.remap_base(13, 1), Err(PageTableError::NotMapped { vpage: 13 }));
    }

    #[test]
    fn emptied_tables_are_recycled() {
        let mut pt = table();
        let spread: Vec<u64> = (0..64).map(|i| i * (1 << 27) + i).collect();
        for &vp in &spread {
            pt.map_base(vp, vp + 5).unwrap();
        }
        let grown = pt.live_nodes();
        assert!(grown > 64);
        for &vp in &spread {
            pt.unmap_base(vp).unwrap();
        }
        assert_eq!(pt.live_nodes(), 1);
        assert!(pt.mappings().is_empty());
        for &vp in &spread {
            pt.map_base(vp, vp + 9).unwrap();
            assert!(pt.agrees_with_oracle(vp));
        }
        assert_eq!(pt.live_nodes(), grown);
    }

    #[test]
    fn random_maps_match_oracle() {
        let mut pt = table();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut reference = HashMap::new();
        while reference.len() < 10_000 {
            let v = rng.gen_range(0..(1u64 << 36));
            let p = rng.gen_range(0..(1u64 << 20));
            if pt.map_base(v, p).is_ok() {
                reference.insert(v, p);
            }
        }
        for (&v, &p) in &reference {
            assert!(pt.agrees_with_oracle(v));
            assert_eq!(pt.oracle().get(Asid(1), v), Some(p));
        }
        assert_eq!(pt.mapped_pages(), 10_000);
    }

    #[test]
    fn random_map_unmap_interleaving_matches_oracle() {
        let mut pt = table();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut live: Vec<u64> = Vec::new();
        for _ in 0..20_000 {
            if live.is_empty() || rng.gen_bool(0.6) {
                let v = rng.gen_range(0..4096u64);
                if pt.map_base(v, rng.gen_range(0..100_000)).is_ok() {
                    live.push(v);
                }
            } else {
                let i = rng.gen_range(0..live.len());
                let v = live.swap_remove(i);
                pt.unmap_base(v).unwrap();
            }
        }
        for v in 0..4096 {
            assert!(pt.agrees_with_oracle(v), "vpage {v}");
        }
        assert_eq!(pt.oracle().len() as u64, pt.mapped_pages());
    }

    #[test]
    fn coalesce_keeps_every_translation() {
        let mut pt = table();
        map_frame(&mut pt, 3, 10);
        let before: Vec<_> = (0..512).map(|s| pt.walk_page(3 * 512 + s).translation.unwrap().ppage).collect();
        pt.set_coalesced(3, 10).unwrap();
        for s in 0..512u64 {
            let w = pt.walk_page(3 * 512 + s);
            let t = w.translation.unwrap();
            assert_eq!(t.ppage, before[s as usize]);
            assert_eq!(t.size, PageSize::Large);
            assert_eq!(w.levels, 3);
            assert!(pt.agrees_with_oracle(3 * 512 + s));
        }
    }

    #[test]
    fn coalesce_rejects_missing_or_permuted_slot() {
        let mut pt = table();
        for s in (0..512).filter(|&s| s != 3) {
            pt.map_base(s, 512 + s).unwrap();
        }
        assert!(matches!(pt.set_coalesced(0, 1), Err(PageTableError::NotCoalescible { .. })));

        let mut pt = table();
        map_frame(&mut pt, 0, 1);
        pt.unmap_base(4).unwrap();
        pt.unmap_base(5).unwrap();
        pt.map_base(4, 512 + 5).unwrap();
        pt.map_base(5, 512 + 4).unwrap();
        assert!(matches!(pt.set_coalesced(0, 1), Err(PageTableError::NotCoalescible { .. })));
        assert!(!pt.is_coalesced(0));
    }

    #[test]
    fn set_then_clear_restores_state() {
        let mut pt = table();
        map_frame(&mut pt, 2, 5);
        pt.map_base(9999, 1).unwrap();
        let snapshot = pt.clone();
        pt.set_coalesced(2, 5).unwrap();
        assert_ne!(pt, snapshot);
        assert_eq!(pt.clear_coalesced(2), Ok(5));
        assert_eq!(pt, snapshot);
        assert_eq!(pt.clear_coalesced(2), Err(PageTableError::NotCoalesced { vframe: 2 }));
    }

    #[test]
    fn coalesced_region_refuses_base_edits() {
        let mut pt = table();
        map_frame(&mut pt, 0, 0);
        pt.set_coalesced(0, 0).unwrap();
        assert_eq!(pt.unmap_base(7), Err(PageTableError::InsideCoalesced { vpage: 7, vframe: 0 }));
        pt.clear_coalesced(0).unwrap();
        pt.unmap_base(7).unwrap();
        assert_eq!(pt.map_base(7, 7), Ok(()));
        pt.set_coalesced(0, 0).unwrap();
        assert_eq!(pt.map_base(7, 9), Err(PageTableError::InsideCoalesced { vpage: 7, vframe: 0 }));
    }

    #[test]
    fn fault_walk_reports_levels_touched() {
        let pt = table();
        let w = pt.walk_page(12345);
        assert!(w.translation.is_none());
        assert_eq!(w.levels, 1);
    }

    #[test]
    fn dump_is_ordered_and_collapses_large_mappings() {
        let mut pt = PageTable::new(Asid(2), PageGeometry::default());
        map_frame(&mut pt, 1, 4);
        pt.set_coalesced(1, 4).unwrap();
        pt.map_base(2048, 77).unwrap();
        pt.map_base(3, 70).unwrap();
        let expected = "2 0x3 0x46 4K\n2 0x200 0x800 2M\n2 0x800 0x4d 4K\n";
        assert_eq!(pt.dump(), expected);
    }
}
