//! Contiguity-aware compaction: splinter fragmented large pages, then pack
//! splintered frames of one owner together so whole frames become free.

use serde::{Deserialize, Serialize};

use crate::allocator::{FrameAllocator, SlotState};
use crate::error::{ConfigError, Error, Result};
use crate::geometry::{Asid, FrameNum};
use crate::page_table::PageTable;
use crate::tlb::TlbInvalidate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompactionConfig {
    /// Fraction of a coalesced frame's slots that must be unallocated
    /// before it is splintered.
    pub splinter_threshold: f64,
    /// Whole-GPU stall charged per migrated base page.
    pub page_copy_cycles: u64,
    /// Compact all owners when empty frames drop below this fraction.
    pub low_water_fraction: f64,
}

impl Default for CompactionConfig {
    fn default() -> Self {
        Self {
            splinter_threshold: 0.5,
            page_copy_cycles: 200,
            low_water_fraction: 0.01,
        }
    }
}

impl CompactionConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if !(self.splinter_threshold > 0.0 && self.splinter_threshold <= 1.0) {
            return Err(ConfigError::invalid(
                "compaction.splinter_threshold",
                "must lie in (0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.low_water_fraction) {
            return Err(ConfigError::invalid(
                "compaction.low_water_fraction",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Splinter decision for a frame with `unallocated` of `slots` slots free.
    pub fn should_splinter(&self, unallocated: u64, slots: u64) -> bool {
        unallocated as f64 / slots as f64 > self.splinter_threshold
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompactionOutcome {
    pub freed_frames: u64,
    pub migrated_pages: u64,
    pub stall_cycles: u64,
}

impl CompactionOutcome {
    pub fn absorb(&mut self, o: CompactionOutcome) {
        self.freed_frames += o.freed_frames;
        self.migrated_pages += o.migrated_pages;
        self.stall_cycles += o.stall_cycles;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompactionStats {
    pub splinters: u64,
    pub compactions: u64,
    pub migrated_pages: u64,
    pub freed_frames: u64,
    pub total_stall_cycles: u64,
}

impl CompactionStats {
    pub fn record(&mut self, o: &CompactionOutcome) {
        if o.migrated_pages > 0 || o.freed_frames > 0 {
            self.compactions += 1;
        }
        self.migrated_pages += o.migrated_pages;
        self.freed_frames += o.freed_frames;
        self.total_stall_cycles += o.stall_cycles;
    }
}

/// Reverts a coalesced frame to base mappings. Slots the application had
/// already freed are released now; surviving pages stay where they are.
pub fn splinter(
    frame: FrameNum,
    alloc: &mut FrameAllocator,
    pt: &mut PageTable,
    tlbs: &mut impl TlbInvalidate,
) -> Result<()> {
    let state = alloc.frame(frame);
    if !state.coalesced {
        return Err(Error::Contract(format!("frame {frame} is not coalesced")));
    }
    let g = alloc.geometry();
    let vframe = g.frame_of_page(state.slot(0).expect("coalesced frame is full").vpage);
    pt.clear_coalesced(vframe)?;
    alloc.set_coalesced(frame, false);
    tlbs.flush_frame(pt.asid(), vframe);
    let reserved: Vec<_> = alloc
        .frame(frame)
        .slots()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.filter(|s| s.state == SlotState::Reserved).map(|s| (i, s.vpage)))
        .collect();
    let p_base = g.first_page_of_frame(frame);
    for (slot, vpage) in reserved {
        pt.unmap_base(vpage)?;
        alloc.release_reserved(p_base + slot as u64);
    }
    Ok(())
}

/// Picks the owner's splintered partial frames that can be emptied into the
/// owner's other partial frames, sparsest first.
pub fn plan(alloc: &FrameAllocator, asid: Asid) -> Vec<FrameNum> {
    plan_among(alloc, asid, |_| true)
}

/// Like [`plan`], but only frames accepted by `source` may be emptied; every
/// partial frame of the owner still counts as a destination.
pub fn plan_among(alloc: &FrameAllocator, asid: Asid, source: impl Fn(FrameNum) -> bool) -> Vec<FrameNum> {
    let all: Vec<(u32, u32, FrameNum)> = alloc
        .partial_frames(asid)
        .into_iter()
        .map(|f| {
            let s = alloc.frame(f);
            (s.popcount(), s.free_slots(), f)
        })
        .collect();
    let mut capacity: u64 = all.iter().map(|p| u64::from(p.1)).sum();
    let mut partial: Vec<_> = all.into_iter().filter(|p| source(p.2)).collect();
    partial.sort();
    let mut chosen = Vec::new();
    let mut moved = 0u64;
    for &(used, free, frame) in &partial {
        // Choosing this frame removes its free slots from the destinations.
        if moved + u64::from(used) <= capacity - u64::from(free) {
            moved += u64::from(used);
            capacity -= u64::from(free);
            chosen.push(frame);
        } else {
            break;
        }
    }
    chosen
}

/// Migrates every page of `frames` (all splintered, all owned by
/// `pt.asid()`) into the owner's other partial frames, most-full first, and
/// then into fresh frames.
pub fn compact(
    frames: &[FrameNum],
    alloc: &mut FrameAllocator,
    pt: &mut PageTable,
    tlbs: &mut impl TlbInvalidate,
    config: &CompactionConfig,
) -> Result<CompactionOutcome> {
    let asid = pt.asid();
    for &f in frames {
        let s = alloc.frame(f);
        if s.coalesced {
            return Err(Error::Contract(format!("frame {f} must be splintered before compaction")));
        }
        if s.is_mixed() || s.owner.is_some_and(|o| o != asid) {
            return Err(Error::Contract(format!("frame {f} is not owned solely by asid {asid}")));
        }
    }
    let g = alloc.geometry();
    let mut dests: Vec<FrameNum> = alloc
        .partial_frames(asid)
        .into_iter()
        .filter(|f| !frames.contains(f))
        .collect();
    dests.sort_by_key(|&f| (std::cmp::Reverse(alloc.frame(f).popcount()), f));
    let mut outcome = CompactionOutcome::default();
    let mut di = 0;
    let mut cursor: std::collections::HashMap<FrameNum, usize> = std::collections::HashMap::new();
    for &src in frames {
        let pages: Vec<(usize, u64)> = alloc
            .frame(src)
            .slots()
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (i, s.vpage)))
            .collect();
        for (slot, vpage) in pages {
            let dest = loop {
                if di < dests.len() && alloc.frame(dests[di]).free_slots() > 0 {
                    break dests[di];
                }
                if di < dests.len() {
                    di += 1;
                    continue;
                }
                let fresh = alloc
                    .frames()
                    .iter()
                    .find(|f| f.is_empty() && !frames.contains(&f.frame))
                    .map(|f| f.frame)
                    .ok_or_else(|| Error::Contract("no destination frame for compaction".into()))?;
                dests.push(fresh);
            };
            let d = alloc.frame(dest);
            let to_slot = if d.slot(slot).is_none() {
                slot
            } else {
                // destinations only fill up here, so the scan never backs up
                let c = cursor.entry(dest).or_insert(0);
                while d.slot(*c).is_some() {
                    *c += 1;
                }
                *c
            };
            let from = g.first_page_of_frame(src) + slot as u64;
            let to = g.first_page_of_frame(dest) + to_slot as u64;
            alloc.migrate(from, to);
            pt.remap_base(vpage, to)?;
            tlbs.flush_page(asid, vpage);
            outcome.migrated_pages += 1;
        }
        if alloc.frame(src).is_empty() {
            outcome.freed_frames += 1;
        }
    }
    outcome.stall_cycles = outcome.migrated_pages * config.page_copy_cycles;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::AllocPolicy;
    use crate::coalescer::coalesce;
    use crate::geometry::{PageGeometry, VirtAddr};
    use crate::tlb::NoTlb;

    const FRAME: u64 = 2 * 1024 * 1024;

    fn mapped(frames: u64) -> (FrameAllocator, PageTable) {
        let g = PageGeometry::default();
        (FrameAllocator::new(g, frames, AllocPolicy::Cocoa), PageTable::new(Asid(0), g))
    }

    fn alloc_map(a: &mut FrameAllocator, pt: &mut PageTable, v: u64, n: u64) -> Vec<(u64, u64)> {
        let placed = a.allocate_en_masse(pt.asid(), VirtAddr(v), n).unwrap();
        for (vp, pp) in &placed {
            pt.map_base(*vp, *pp).unwrap();
            a.write_content(*pp, vp ^ 0x5555);
        }
        placed
    }

    #[test]
    fn threshold_arithmetic() {
        let c = CompactionConfig::default();
        assert!(c.should_splinter(300, 512));
        assert!(!c.should_splinter(200, 512));
        assert!(!c.should_splinter(256, 512));
    }

    #[test]
    fn splinter_after_coalesce_keeps_translations() {
        let (mut a, mut pt) = mapped(2);
        alloc_map(&mut a, &mut pt, 0, 512);
        let snapshot = pt.clone();
        coalesce(0, &mut a, &mut pt, &mut NoTlb).unwrap();
        splinter(0, &mut a, &mut pt, &mut NoTlb).unwrap();
        assert_eq!(pt, snapshot);
        assert!(!a.frame(0).coalesced);
        assert!(matches!(splinter(0, &mut a, &mut pt, &mut NoTlb), Err(Error::Contract(_))));
    }

    #[test]
    fn splinter_releases_reserved_slots() {
        let (mut a, mut pt) = mapped(2);
        let placed = alloc_map(&mut a, &mut pt, 0, 512);
        coalesce(0, &mut a, &mut pt, &mut NoTlb).unwrap();
        for &(vp, pp) in &placed[..300] {
            a.reserve(Asid(0), vp, pp).unwrap();
        }
        assert_eq!(a.frame(0).reserved(), 300);
        splinter(0, &mut a, &mut pt, &mut NoTlb).unwrap();
        assert_eq!(a.frame(0).popcount(), 212);
        assert_eq!(pt.mapped_pages(), 212);
        for &(vp, pp) in &placed[300..] {
            assert_eq!(pt.walk_page(vp).translation.unwrap().ppage, pp);
        }
        a.reconcile().unwrap();
    }

    #[test]
    fn two_quarter_frames_pack_into_one_fresh_frame() {
        let (mut a, mut pt) = mapped(4);
        let first = alloc_map(&mut a, &mut pt, 0, 128);
        let second = alloc_map(&mut a, &mut pt, FRAME, 128);
        let sources = vec![first[0].1 / 512, second[0].1 / 512];
        let empty_before = a.empty_frames();
        let out = compact(&sources, &mut a, &mut pt, &mut NoTlb, &CompactionConfig::default()).unwrap();
        assert_eq!(out.freed_frames, 2);
        assert_eq!(out.migrated_pages, 256);
        assert_eq!(out.stall_cycles, 256 * 200);
        assert_eq!(a.empty_frames(), empty_before + 1);
        let used: Vec<_> = a.frames().iter().filter(|f| !f.is_empty()).collect();
        assert_eq!(used.len(), 1);
        assert_eq!(used[0].popcount(), 256);
        for (vp, _) in first.iter().chain(&second) {
            let pp = pt.walk_page(*vp).translation.unwrap().ppage;
            let s = a.slot_use(pp).unwrap();
            assert_eq!((s.vpage, s.content), (*vp, vp ^ 0x5555));
        }
        a.reconcile().unwrap();
    }

    #[test]
    fn empty_compaction_is_free() {
        let (mut a, mut pt) = mapped(2);
        let out = compact(&[], &mut a, &mut pt, &mut NoTlb, &CompactionConfig::default()).unwrap();
        assert_eq!(out, CompactionOutcome::default());
    }

    #[test]
    fn refuses_coalesced_or_foreign_frames() {
        let (mut a, mut pt) = mapped(3);
        alloc_map(&mut a, &mut pt, 0, 512);
        coalesce(0, &mut a, &mut pt, &mut NoTlb).unwrap();
        assert!(matches!(
            compact(&[0], &mut a, &mut pt, &mut NoTlb, &CompactionConfig::default()),
            Err(Error::Contract(_))
        ));
        let mut other = PageTable::new(Asid(1), PageGeometry::default());
        alloc_map(&mut a, &mut other, 0, 10);
        assert!(matches!(
            compact(&[1], &mut a, &mut pt, &mut NoTlb, &CompactionConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn plan_only_picks_frames_that_fit_elsewhere() {
        let (mut a, mut pt) = mapped(6);
        alloc_map(&mut a, &mut pt, 0, 400);
        alloc_map(&mut a, &mut pt, FRAME, 50);
        alloc_map(&mut a, &mut pt, 2 * FRAME, 60);
        let chosen = plan(&a, Asid(0));
        assert_eq!(chosen.len(), 2);
        let bloat_before = a.memory_bloat(Asid(0));
        let out = compact(&chosen, &mut a, &mut pt, &mut NoTlb, &CompactionConfig::default()).unwrap();
        assert_eq!(out.freed_frames, 2);
        assert!(a.memory_bloat(Asid(0)) <= bloat_before);
        assert_eq!(a.empty_frames(), 5);
        assert!(plan(&a, Asid(0)).is_empty());
    }
}
