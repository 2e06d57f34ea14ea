//! In-place coalescer: promotes a fully populated, slot-preserving,
//! single-owner large frame to a large-page mapping without moving data.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::allocator::{FrameAllocator, LargeFrameState, SlotState};
use crate::error::{Error, Result};
use crate::geometry::{Asid, FrameNum, PageGeometry};
use crate::page_table::PageTable;
use crate::tlb::TlbInvalidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoalescerConfig {
    /// Page-table update cost; the owner's new walks wait this long.
    pub metadata_latency: u64,
}

impl Default for CoalescerConfig {
    fn default() -> Self {
        Self {
            metadata_latency: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Incomplete,
    MixedOwner,
    NonContiguous,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoalescerStats {
    pub frames_checked: u64,
    pub frames_coalesced: u64,
    pub rejected_incomplete: u64,
    pub rejected_mixed_owner: u64,
    pub rejected_non_contiguous: u64,
}

/// Checks the frame-side conditions and returns the owner and the virtual
/// frame the physical frame mirrors.
pub fn classify(frame: &LargeFrameState, g: &PageGeometry) -> std::result::Result<(Asid, FrameNum), Rejection> {
    if !frame.is_full() || frame.reserved() > 0 {
        return Err(Rejection::Incomplete);
    }
    if frame.is_mixed() {
        return Err(Rejection::MixedOwner);
    }
    let first = frame.slot(0).expect("full frame");
    if g.slot_of_page(first.vpage) != 0 {
        return Err(Rejection::NonContiguous);
    }
    let v_base = first.vpage;
    for (i, s) in frame.slots().iter().enumerate() {
        let s = s.as_ref().expect("full frame");
        if s.state != SlotState::Allocated || s.vpage != v_base + i as u64 {
            return Err(Rejection::NonContiguous);
        }
    }
    Ok((first.asid, g.frame_of_page(v_base)))
}

/// True iff the frame is full, single-owner, slot-preserving, and the
/// owner's page table agrees with the frame contents.
pub fn is_coalescible(frame: &LargeFrameState, pt: &PageTable) -> bool {
    let g = pt.geometry();
    let Ok((asid, vframe)) = classify(frame, &g) else {
        return false;
    };
    if asid != pt.asid() || pt.is_coalesced(vframe) || frame.coalesced {
        return false;
    }
    pt.maps_frame_in_place(vframe, frame.frame)
}

/// Marks the frame coalesced in the page table and flushes stale entries.
pub fn coalesce(
    frame: FrameNum,
    alloc: &mut FrameAllocator,
    pt: &mut PageTable,
    tlbs: &mut impl TlbInvalidate,
) -> Result<FrameNum> {
    let state = alloc.frame(frame);
    if !is_coalescible(state, pt) {
        return Err(Error::Contract(format!("frame {frame} is not coalescible")));
    }
    let g = alloc.geometry();
    let vframe = g.frame_of_page(state.slot(0).expect("full").vpage);
    pt.set_coalesced(vframe, frame)?;
    alloc.set_coalesced(frame, true);
    tlbs.flush_frame(pt.asid(), vframe);
    Ok(vframe)
}

/// Candidate frames reported by the allocator after an allocation batch.
#[derive(Debug, Clone, Default)]
pub struct Coalescer {
    pub config: CoalescerConfig,
    candidates: VecDeque<FrameNum>,
    stats: CoalescerStats,
}

impl Coalescer {
    pub fn new(config: CoalescerConfig) -> Self {
        Self {
            config,
            candidates: VecDeque::new(),
            stats: CoalescerStats::default(),
        }
    }

    pub fn stats(&self) -> CoalescerStats {
        self.stats
    }

    /// Replaces the candidate list with the frames of the latest batch.
    pub fn notify(&mut self, frames: impl IntoIterator<Item = FrameNum>) {
        self.candidates.clear();
        for f in frames {
            if !self.candidates.contains(&f) {
                self.candidates.push_back(f);
            }
        }
    }

    pub fn candidates(&self) -> impl Iterator<Item = &FrameNum> {
        self.candidates.iter()
    }

    /// Checks every pending candidate; coalesces those that qualify when
    /// `apply` is set. Returns `(asid, vframe)` of each coalesced frame.
    pub fn run(
        &mut self,
        alloc: &mut FrameAllocator,
        tables: &mut std::collections::BTreeMap<Asid, PageTable>,
        tlbs: &mut impl TlbInvalidate,
        apply: bool,
    ) -> Vec<(Asid, FrameNum)> {
        let g = alloc.geometry();
        let mut done = Vec::new();
        while let Some(frame) = self.candidates.pop_front() {
            let state = alloc.frame(frame);
            if state.coalesced || state.is_empty() {
                continue;
            }
            self.stats.frames_checked += 1;
            match classify(state, &g) {
                Err(Rejection::Incomplete) => self.stats.rejected_incomplete += 1,
                Err(Rejection::MixedOwner) => self.stats.rejected_mixed_owner += 1,
                Err(Rejection::NonContiguous) => self.stats.rejected_non_contiguous += 1,
                Ok((asid, _)) => {
                    let Some(pt) = tables.get_mut(&asid) else {
                        self.stats.rejected_non_contiguous += 1;
                        continue;
                    };
                    if !is_coalescible(state, pt) {
                        self.stats.rejected_non_contiguous += 1;
                        continue;
                    }
                    if apply {
                        let vframe = coalesce(frame, alloc, pt, tlbs).expect("checked coalescible");
                        self.stats.frames_coalesced += 1;
                        done.push((asid, vframe));
                    }
                }
            }
        }
        done
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::AllocPolicy;
    use crate::geometry::VirtAddr;
    use crate::page_table::PageSize;
    use crate::tlb::{HitLevel, TlbConfig, TlbEntry, TlbHierarchy};

    const FRAME: u64 = 2 * 1024 * 1024;

    fn setup(pages: u64) -> (FrameAllocator, PageTable, FrameNum) {
        let g = PageGeometry::default();
        let mut a = FrameAllocator::new(g, 4, AllocPolicy::Cocoa);
        let mut pt = PageTable::new(Asid(0), g);
        let placed = a.allocate_en_masse(Asid(0), VirtAddr(3 * FRAME), pages).unwrap();
        for (vp, pp) in &placed {
            pt.map_base(*vp, *pp).unwrap();
        }
        (a, pt, placed[0].1 / 512)
    }

    /// Independent scan: every slot i of the frame must hold v_base + i and
    /// the table must map it back.
    fn brute_force_contiguous(a: &FrameAllocator, pt: &PageTable, frame: FrameNum) -> bool {
        let f = a.frame(frame);
        let Some(first) = f.slot(0) else { return false };
        if first.vpage % 512 != 0 {
            return false;
        }
        (0..512).all(|i| match f.slot(i) {
            Some(s) => {
                s.asid == first.asid
                    && s.vpage == first.vpage + i as u64
                    && pt.oracle().get(s.asid, s.vpage) == Some(frame * 512 + i as u64)
            }
            None => false,
        })
    }

    #[test]
    fn full_slot_preserving_frame_is_coalescible() {
        let (a, pt, frame) = setup(512);
        assert!(is_coalescible(a.frame(frame), &pt));
        assert!(brute_force_contiguous(&a, &pt, frame));
    }

    #[test]
    fn incomplete_frame_is_not() {
        let (a, pt, frame) = setup(511);
        assert!(!is_coalescible(a.frame(frame), &pt));
        assert_eq!(classify(a.frame(frame), &pt.geometry()), Err(Rejection::Incomplete));
    }

    #[test]
    fn swapped_slots_are_not_contiguous() {
        let (mut a, mut pt, frame) = setup(512);
        let v = 3 * 512;
        // Swap the physical homes of virtual pages v+10 and v+11.
        let (p10, p11) = (frame * 512 + 10, frame * 512 + 11);
        a.migrate(p10, 3 * 512 + 10);
        a.migrate(p11, p10);
        a.migrate(3 * 512 + 10, p11);
        pt.unmap_base(v + 10).unwrap();
        pt.unmap_base(v + 11).unwrap();
        pt.map_base(v + 10, p11).unwrap();
        pt.map_base(v + 11, p10).unwrap();
        assert_eq!(is_coalescible(a.frame(frame), &pt), brute_force_contiguous(&a, &pt, frame));
        assert!(!is_coalescible(a.frame(frame), &pt));
    }

    #[test]
    fn coalesce_is_in_place_and_refills_as_large() {
        let (mut a, mut pt, frame) = setup(512);
        let g = PageGeometry::default();
        let mut tlbs = TlbHierarchy::new(TlbConfig::default(), g, 1);
        let before_pt: Vec<_> = (0..512).map(|i| pt.translate(VirtAddr(3 * FRAME + i * 4096)).unwrap()).collect();
        let before_slots = a.frame(frame).slots().to_vec();
        // A stale base entry from before coalescing.
        let t = pt.walk_page(3 * 512 + 5).translation.unwrap();
        tlbs.fill_l1(0, TlbEntry::from_translation(Asid(0), 3 * 512 + 5, t, &g));

        let vframe = coalesce(frame, &mut a, &mut pt, &mut tlbs).unwrap();
        assert_eq!(vframe, 3);
        assert_eq!(a.frame(frame).slots(), &before_slots[..]);
        for i in 0..512 {
            assert_eq!(pt.translate(VirtAddr(3 * FRAME + i * 4096)).unwrap(), before_pt[i as usize]);
        }
        assert_eq!(tlbs.lookup(0, Asid(0), 3 * 512 + 5, 0).hit_level, HitLevel::Miss);
        let t = pt.walk_page(3 * 512 + 5).translation.unwrap();
        assert_eq!(t.size, PageSize::Large);
        tlbs.fill_l1(0, TlbEntry::from_translation(Asid(0), 3 * 512 + 5, t, &g));
        assert_eq!(tlbs.lookup(0, Asid(0), 3 * 512 + 400, 5).hit_level, HitLevel::L1);
        a.reconcile().unwrap();
    }

    #[test]
    fn coalescing_a_non_coalescible_frame_is_a_contract_violation() {
        let (mut a, mut pt, frame) = setup(100);
        let mut tlbs = crate::tlb::NoTlb;
        assert!(matches!(coalesce(frame, &mut a, &mut pt, &mut tlbs), Err(Error::Contract(_))));
    }

    #[test]
    fn run_counts_rejections() {
        let g = PageGeometry::default();
        let mut a = FrameAllocator::new(g, 4, AllocPolicy::Cocoa);
        let mut tables = std::collections::BTreeMap::new();
        tables.insert(Asid(0), PageTable::new(Asid(0), g));
        let mut frames = vec![];
        for (start, n) in [(0u64, 512u64), (FRAME, 300)] {
            for (vp, pp) in a.allocate_en_masse(Asid(0), VirtAddr(start), n).unwrap() {
                tables.get_mut(&Asid(0)).unwrap().map_base(vp, pp).unwrap();
                frames.push(pp / 512);
            }
        }
        let mut c = Coalescer::new(CoalescerConfig::default());
        c.notify(frames);
        let done = c.run(&mut a, &mut tables, &mut crate::tlb::NoTlb, true);
        assert_eq!(done, vec![(Asid(0), 0)]);
        let s = c.stats();
        assert_eq!((s.frames_checked, s.frames_coalesced, s.rejected_incomplete), (2, 1, 1));
    }
}
