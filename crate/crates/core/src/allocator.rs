//! Physical large-frame bookkeeping and the two placement policies.
//!
//! `Cocoa` is the contiguity-conserving allocator: a virtual large frame is
//! bound to one physical large frame and each base page lands in the slot
//! matching its position in the virtual frame, and a physical frame only
//! ever holds one application's pages unless memory is exhausted.
//!
//! `GpuMmu` is the baseline: pages are spread round-robin over a small
//! window of open frames without regard to owner or contiguity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::AllocError;
use crate::geometry::{Asid, FrameNum, PageGeometry, PageNum, VirtAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocPolicy {
    Cocoa,
    GpuMmu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Allocated,
    /// Freed by the application but still covered by a large mapping.
    Reserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotUse {
    pub asid: Asid,
    pub vpage: PageNum,
    pub content: u64,
    pub state: SlotState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FrameClass {
    Empty,
    Partial(Asid),
    Full(Asid),
    Shared,
}

#[derive(Debug, Clone)]
pub struct LargeFrameState {
    pub frame: FrameNum,
    pub owner: Option<Asid>,
    pub coalesced: bool,
    slots: Vec<Option<SlotUse>>,
    occupied: u32,
    reserved: u32,
    foreign: u32,
    class: FrameClass,
}

impl LargeFrameState {
    fn new(frame: FrameNum, slots: usize) -> Self {
        Self {
            frame,
            owner: None,
            coalesced: false,
            slots: vec![None; slots],
            occupied: 0,
            reserved: 0,
            foreign: 0,
            class: FrameClass::Empty,
        }
    }

    pub fn slot(&self, i: usize) -> Option<&SlotUse> {
        self.slots[i].as_ref()
    }

    pub fn slots(&self) -> &[Option<SlotUse>] {
        &self.slots
    }

    /// Slots holding data (allocated or reserved).
    pub fn popcount(&self) -> u32 {
        self.occupied
    }

    pub fn reserved(&self) -> u32 {
        self.reserved
    }

    pub fn free_slots(&self) -> u32 {
        self.slots.len() as u32 - self.occupied
    }

    pub fn is_full(&self) -> bool {
        self.occupied as usize == self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied == 0
    }

    /// More than one asid has pages here.
    pub fn is_mixed(&self) -> bool {
        self.foreign > 0
    }

    pub fn class(&self) -> FrameClass {
        self.class
    }

    /// 512-bit occupancy bitmap, least-significant bit = slot 0.
    pub fn bitmap(&self) -> Vec<u64> {
        let mut words = vec![0u64; self.slots.len().div_ceil(64)];
        for (i, s) in self.slots.iter().enumerate() {
            if s.is_some() {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }

    fn computed_class(&self) -> FrameClass {
        match self.owner {
            None => FrameClass::Empty,
            Some(_) if self.foreign > 0 => FrameClass::Shared,
            Some(o) if self.is_full() => FrameClass::Full(o),
            Some(o) => FrameClass::Partial(o),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocStats {
    pub requests: u64,
    pub pages_allocated: u64,
    pub pages_freed: u64,
    /// Pages placed in a frame owned by another asid (soft guarantee relaxed).
    pub soft_guarantee_violations: u64,
}

#[derive(Debug, Clone)]
pub struct FrameAllocator {
    geometry: PageGeometry,
    policy: AllocPolicy,
    frames: Vec<LargeFrameState>,
    empty: BTreeSet<FrameNum>,
    partial: BTreeMap<Asid, BTreeSet<FrameNum>>,
    full: BTreeSet<FrameNum>,
    shared: BTreeSet<FrameNum>,
    bindings: FxHashMap<(Asid, FrameNum), FrameNum>,
    window: Vec<FrameNum>,
    window_cursor: usize,
    window_size: usize,
    free_slots: u64,
    allocated_by: BTreeMap<Asid, u64>,
    stats: AllocStats,
}

impl FrameAllocator {
    pub fn new(geometry: PageGeometry, total_frames: u64, policy: AllocPolicy) -> Self {
        let slots = geometry.slots_per_large_frame() as usize;
        Self {
            geometry,
            policy,
            frames: (0..total_frames).map(|f| LargeFrameState::new(f, slots)).collect(),
            empty: (0..total_frames).collect(),
            partial: BTreeMap::new(),
            full: BTreeSet::new(),
            shared: BTreeSet::new(),
            bindings: FxHashMap::default(),
            window: Vec::new(),
            window_cursor: 0,
            window_size: 8,
            free_slots: total_frames * slots as u64,
            allocated_by: BTreeMap::new(),
            stats: AllocStats::default(),
        }
    }

    /// Number of open frames the baseline policy interleaves over.
    pub fn with_gpu_mmu_window(mut self, frames: usize) -> Self {
        self.window_size = frames.max(1);
        self
    }

    pub fn policy(&self) -> AllocPolicy {
        self.policy
    }

    pub fn geometry(&self) -> PageGeometry {
        self.geometry
    }

    pub fn total_frames(&self) -> u64 {
        self.frames.len() as u64
    }

    pub fn total_slots(&self) -> u64 {
        self.frames.len() as u64 * self.geometry.slots_per_large_frame()
    }

    pub fn free_slots(&self) -> u64 {
        self.free_slots
    }

    pub fn used_slots(&self) -> u64 {
        self.total_slots() - self.free_slots
    }

    pub fn utilization(&self) -> f64 {
        self.used_slots() as f64 / self.total_slots() as f64
    }

    pub fn empty_frames(&self) -> usize {
        self.empty.len()
    }

    pub fn shared_frames(&self) -> usize {
        self.shared.len()
    }

    pub fn stats(&self) -> AllocStats {
        self.stats
    }

    pub fn frame(&self, frame: FrameNum) -> &LargeFrameState {
        &self.frames[frame as usize]
    }

    pub fn frames(&self) -> &[LargeFrameState] {
        &self.frames
    }

    /// Single-owner frames of `asid` that still have free slots, ascending.
    pub fn partial_frames(&self, asid: Asid) -> Vec<FrameNum> {
        self.partial
            .get(&asid)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Pages currently allocated (not reserved) by `asid`.
    pub fn allocated_pages(&self, asid: Asid) -> u64 {
        self.allocated_by.get(&asid).copied().unwrap_or(0)
    }

    pub fn asids(&self) -> Vec<Asid> {
        self.allocated_by.keys().copied().collect()
    }

    pub fn slot_use(&self, ppage: PageNum) -> Option<&SlotUse> {
        let g = self.geometry;
        self.frames[g.frame_of_page(ppage) as usize].slots[g.slot_of_page(ppage) as usize].as_ref()
    }

    pub fn write_content(&mut self, ppage: PageNum, content: u64) {
        let g = self.geometry;
        if let Some(s) = &mut self.frames[g.frame_of_page(ppage) as usize].slots[g.slot_of_page(ppage) as usize] {
            s.content = content;
        }
    }

    pub fn set_coalesced(&mut self, frame: FrameNum, coalesced: bool) {
        self.frames[frame as usize].coalesced = coalesced;
    }

    fn reclassify(&mut self, frame: FrameNum) {
        let f = &self.frames[frame as usize];
        let old = f.class;
        let new = f.computed_class();
        if old == new {
            return;
        }
        match old {
            FrameClass::Empty => {
                self.empty.remove(&frame);
            }
            FrameClass::Partial(a) => {
                if let Some(set) = self.partial.get_mut(&a) {
                    set.remove(&frame);
                    if set.is_empty() {
                        self.partial.remove(&a);
                    }
                }
            }
            FrameClass::Full(_) => {
                self.full.remove(&frame);
            }
            FrameClass::Shared => {
                self.shared.remove(&frame);
            }
        }
        match new {
            FrameClass::Empty => {
                self.empty.insert(frame);
            }
            FrameClass::Partial(a) => {
                self.partial.entry(a).or_default().insert(frame);
            }
            FrameClass::Full(_) => {
                self.full.insert(frame);
            }
            FrameClass::Shared => {
                self.shared.insert(frame);
            }
        }
        self.frames[frame as usize].class = new;
    }

    /// Places one page into a specific free slot.
    fn place(&mut self, asid: Asid, vpage: PageNum, frame: FrameNum, slot: usize) -> PageNum {
        let f = &mut self.frames[frame as usize];
        debug_assert!(f.slots[slot].is_none());
        match f.owner {
            None => f.owner = Some(asid),
            Some(o) if o != asid => {
                f.foreign += 1;
                self.stats.soft_guarantee_violations += u64::from(self.policy == AllocPolicy::Cocoa);
            }
            _ => {}
        }
        f.slots[slot] = Some(SlotUse {
            asid,
            vpage,
            content: 0,
            state: SlotState::Allocated,
        });
        f.occupied += 1;
        self.free_slots -= 1;
        *self.allocated_by.entry(asid).or_default() += 1;
        self.stats.pages_allocated += 1;
        self.reclassify(frame);
        self.geometry.first_page_of_frame(frame) + slot as u64
    }

    /// Empties one slot and returns what it held.
    fn vacate(&mut self, ppage: PageNum) -> SlotUse {
        let g = self.geometry;
        let frame = g.frame_of_page(ppage);
        let slot = g.slot_of_page(ppage) as usize;
        let f = &mut self.frames[frame as usize];
        let used = f.slots[slot].take().expect("vacating an empty slot");
        f.occupied -= 1;
        if used.state == SlotState::Reserved {
            f.reserved -= 1;
        }
        if Some(used.asid) != f.owner {
            f.foreign -= 1;
        }
        if f.occupied == 0 {
            f.owner = None;
            f.coalesced = false;
            f.foreign = 0;
        } else if f.foreign > 0 && f.slots.iter().flatten().all(|s| Some(s.asid) != f.owner) {
            // The owner left a shared frame; hand it to whoever remains first.
            let new_owner = f.slots.iter().flatten().next().map(|s| s.asid);
            f.owner = new_owner;
            f.foreign = f.slots.iter().flatten().filter(|s| Some(s.asid) != new_owner).count() as u32;
        }
        self.free_slots += 1;
        if used.state == SlotState::Allocated {
            *self.allocated_by.get_mut(&used.asid).expect("tracked asid") -= 1;
        }
        self.reclassify(frame);
        used
    }

    /// Frees the slot behind `ppage`, which must belong to `asid`.
    pub fn release(&mut self, asid: Asid, vpage: PageNum, ppage: PageNum) -> Result<SlotUse, AllocError> {
        match self.slot_use(ppage) {
            Some(s) if s.asid == asid && s.vpage == vpage => {}
            _ => return Err(AllocError::Protection { asid, vpage }),
        }
        self.stats.pages_freed += 1;
        Ok(self.vacate(ppage))
    }

    /// Marks a page freed by the application while its frame stays
    /// coalesced: the slot remains occupied until the frame is splintered.
    pub fn reserve(&mut self, asid: Asid, vpage: PageNum, ppage: PageNum) -> Result<(), AllocError> {
        let g = self.geometry;
        let frame = g.frame_of_page(ppage);
        let slot = g.slot_of_page(ppage) as usize;
        let f = &mut self.frames[frame as usize];
        match &mut f.slots[slot] {
            Some(s) if s.asid == asid && s.vpage == vpage && s.state == SlotState::Allocated => {
                s.state = SlotState::Reserved;
            }
            _ => return Err(AllocError::Protection { asid, vpage }),
        }
        f.reserved += 1;
        *self.allocated_by.get_mut(&asid).expect("tracked asid") -= 1;
        self.stats.pages_freed += 1;
        Ok(())
    }

    /// Frees a reserved slot (after its frame was splintered).
    pub fn release_reserved(&mut self, ppage: PageNum) -> SlotUse {
        let used = self.vacate(ppage);
        debug_assert_eq!(used.state, SlotState::Reserved);
        used
    }

    /// Moves a page between slots, keeping its identity and content.
    pub fn migrate(&mut self, from: PageNum, to: PageNum) {
        let used = self.vacate(from);
        let g = self.geometry;
        let ppage = self.place(used.asid, used.vpage, g.frame_of_page(to), g.slot_of_page(to) as usize);
        self.stats.pages_allocated -= 1;
        self.write_content(ppage, used.content);
        if used.state == SlotState::Reserved {
            let f = &mut self.frames[g.frame_of_page(to) as usize];
            f.slots[g.slot_of_page(to) as usize].as_mut().unwrap().state = SlotState::Reserved;
            f.reserved += 1;
            *self.allocated_by.get_mut(&used.asid).unwrap() -= 1;
        }
    }

    /// Capacity `asid` can use without sharing a frame with another asid.
    pub fn owner_capacity(&self, asid: Asid) -> u64 {
        let per_frame = self.geometry.slots_per_large_frame();
        let partial: u64 = self
            .partial
            .get(&asid)
            .map(|s| s.iter().map(|&f| u64::from(self.frames[f as usize].free_slots())).sum())
            .unwrap_or(0);
        self.empty.len() as u64 * per_frame + partial
    }

    /// Allocates `n_pages` consecutive virtual pages starting at `v_start`.
    /// Under `Cocoa` the soft guarantee is relaxed only when nothing else fits.
    pub fn allocate_en_masse(&mut self, asid: Asid, v_start: VirtAddr, n_pages: u64) -> Result<Vec<(PageNum, PageNum)>, AllocError> {
        self.allocate_inner(asid, v_start, n_pages, true)
    }

    /// Like [`allocate_en_masse`](Self::allocate_en_masse) but fails instead
    /// of placing pages in another asid's frame.
    pub fn allocate_strict(&mut self, asid: Asid, v_start: VirtAddr, n_pages: u64) -> Result<Vec<(PageNum, PageNum)>, AllocError> {
        self.allocate_inner(asid, v_start, n_pages, false)
    }

    fn allocate_inner(&mut self, asid: Asid, v_start: VirtAddr, n_pages: u64, relax: bool) -> Result<Vec<(PageNum, PageNum)>, AllocError> {
        if n_pages == 0 {
            return Err(AllocError::EmptyRequest);
        }
        if n_pages > self.free_slots {
            return Err(AllocError::OutOfMemory {
                requested: n_pages,
                free: self.free_slots,
            });
        }
        if self.policy == AllocPolicy::Cocoa && !relax && n_pages > self.owner_capacity(asid) {
            return Err(AllocError::WouldViolateSoftGuarantee { asid });
        }
        self.stats.requests += 1;
        let first = self.geometry.base_page_of(v_start);
        let placed = match self.policy {
            AllocPolicy::Cocoa => self.place_cocoa(asid, first, n_pages),
            AllocPolicy::GpuMmu => (first..first + n_pages)
                .map(|vp| (vp, self.place_round_robin(asid, vp)))
                .collect(),
        };
        Ok(placed)
    }

    fn place_cocoa(&mut self, asid: Asid, first: PageNum, n: u64) -> Vec<(PageNum, PageNum)> {
        let g = self.geometry;
        let mut out = Vec::with_capacity(n as usize);
        let mut vp = first;
        let end = first + n;
        while vp < end {
            let vframe = g.frame_of_page(vp);
            let chunk_end = end.min(g.first_page_of_frame(vframe + 1));
            let chunk: Vec<PageNum> = (vp..chunk_end).collect();
            self.place_chunk(asid, vframe, &chunk, &mut out);
            vp = chunk_end;
        }
        out
    }

    fn aligned_slots_free(&self, frame: FrameNum, chunk: &[PageNum]) -> bool {
        let f = &self.frames[frame as usize];
        chunk
            .iter()
            .all(|&vp| f.slots[self.geometry.slot_of_page(vp) as usize].is_none())
    }

    fn place_aligned(&mut self, asid: Asid, frame: FrameNum, chunk: &[PageNum], out: &mut Vec<(PageNum, PageNum)>) {
        for &vp in chunk {
            let slot = self.geometry.slot_of_page(vp) as usize;
            out.push((vp, self.place(asid, vp, frame, slot)));
        }
    }

    fn place_chunk(&mut self, asid: Asid, vframe: FrameNum, chunk: &[PageNum], out: &mut Vec<(PageNum, PageNum)>) {
        // 1. the physical frame already bound to this virtual frame
        if let Some(&pf) = self.bindings.get(&(asid, vframe)) {
            let f = &self.frames[pf as usize];
            if f.owner == Some(asid) && !f.is_mixed() && self.aligned_slots_free(pf, chunk) {
                self.place_aligned(asid, pf, chunk, out);
                return;
            }
        }
        // 2. a fresh empty frame
        if let Some(&pf) = self.empty.iter().next() {
            self.bindings.insert((asid, vframe), pf);
            self.place_aligned(asid, pf, chunk, out);
            return;
        }
        // 3. an owned partial frame with the aligned slots free, least full first
        let mut owned = self.partial_frames(asid);
        owned.sort_by_key(|&f| (self.frames[f as usize].occupied, f));
        if let Some(&pf) = owned.iter().find(|&&f| self.aligned_slots_free(f, chunk)) {
            self.bindings.entry((asid, vframe)).or_insert(pf);
            self.place_aligned(asid, pf, chunk, out);
            return;
        }
        // 4. page by page: aligned slot if possible, else any free owned slot
        for &vp in chunk {
            let slot = self.geometry.slot_of_page(vp) as usize;
            let owned = self.partial_frames(asid);
            let target = owned
                .iter()
                .find(|&&f| self.frames[f as usize].slots[slot].is_none())
                .map(|&f| (f, slot))
                .or_else(|| {
                    owned
                        .iter()
                        .min_by_key(|&&f| (self.frames[f as usize].occupied, f))
                        .map(|&f| (f, self.lowest_free_slot(f)))
                });
            let (frame, slot) = match target {
                Some(t) => t,
                // 5. exhausted: share a frame with another asid
                None => {
                    let f = self
                        .frames
                        .iter()
                        .filter(|f| !f.is_full())
                        .max_by_key(|f| (f.free_slots(), std::cmp::Reverse(f.frame)))
                        .expect("free slot exists")
                        .frame;
                    (f, self.lowest_free_slot(f))
                }
            };
            out.push((vp, self.place(asid, vp, frame, slot)));
        }
    }

    fn lowest_free_slot(&self, frame: FrameNum) -> usize {
        self.frames[frame as usize]
            .slots
            .iter()
            .position(Option::is_none)
            .expect("frame has a free slot")
    }

    fn place_round_robin(&mut self, asid: Asid, vpage: PageNum) -> PageNum {
        self.window.retain(|&f| !self.frames[f as usize].is_full());
        while self.window.len() < self.window_size {
            let next = self.empty.iter().copied().find(|f| !self.window.contains(f)).or_else(|| {
                self.frames
                    .iter()
                    .find(|f| !f.is_full() && !self.window.contains(&f.frame))
                    .map(|f| f.frame)
            });
            match next {
                Some(f) => self.window.push(f),
                None => break,
            }
        }
        let frame = self.window[self.window_cursor % self.window.len()];
        self.window_cursor = self.window_cursor.wrapping_add(1);
        let slot = self.lowest_free_slot(frame);
        self.place(asid, vpage, frame, slot)
    }

    /// Drops the virtual-to-physical frame binding kept for contiguity.
    pub fn unbind(&mut self, asid: Asid, vframe: FrameNum) {
        self.bindings.remove(&(asid, vframe));
    }

    /// Reserved physical slots over pages actually allocated. A single-owner
    /// frame counts as fully reserved by its owner; in a shared frame only
    /// the asid's own slots count.
    pub fn memory_bloat(&self, asid: Asid) -> f64 {
        let per_frame = self.geometry.slots_per_large_frame();
        let mut reserved = 0u64;
        for f in &self.frames {
            if f.is_empty() {
                continue;
            }
            if f.is_mixed() {
                reserved += f.slots.iter().flatten().filter(|s| s.asid == asid).count() as u64;
            } else if f.owner == Some(asid) {
                reserved += per_frame;
            }
        }
        let allocated = self.allocated_pages(asid);
        if allocated == 0 {
            return 1.0;
        }
        (reserved as f64 / allocated as f64).max(1.0)
    }

    /// `frame,owner,popcount,coalesced` for every non-empty frame.
    pub fn frame_map_csv(&self) -> String {
        let mut out = String::from("frame,owner,popcount,coalesced\n");
        for f in self.frames.iter().filter(|f| !f.is_empty()) {
            let owner = f.owner.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", f.frame, owner, f.occupied, u8::from(f.coalesced));
        }
        out
    }

    /// Brute-force scan that checks every list and counter against the
    /// per-frame state.
    pub fn reconcile(&self) -> Result<(), String> {
        let mut free = 0u64;
        let mut per_asid: BTreeMap<Asid, u64> = BTreeMap::new();
        let mut classes = (0usize, 0usize, 0usize, 0usize);
        for f in &self.frames {
            let occupied = f.slots.iter().flatten().count() as u32;
            if occupied != f.occupied {
                return Err(format!("frame {}: popcount {} but {} slots used", f.frame, f.occupied, occupied));
            }
            let reserved = f.slots.iter().flatten().filter(|s| s.state == SlotState::Reserved).count() as u32;
            if reserved != f.reserved {
                return Err(format!("frame {}: reserved count drifted", f.frame));
            }
            if (f.owner.is_none()) != (occupied == 0) {
                return Err(format!("frame {}: owner {:?} with {} used slots", f.frame, f.owner, occupied));
            }
            if f.coalesced && (!f.is_full() || f.owner.is_none() || f.is_mixed()) {
                return Err(format!("frame {}: coalesced but not full single-owner", f.frame));
            }
            let foreign = f.slots.iter().flatten().filter(|s| Some(s.asid) != f.owner).count() as u32;
            if foreign != f.foreign {
                return Err(format!("frame {}: foreign count drifted", f.frame));
            }
            if let Some(o) = f.owner {
                if f.slots.iter().flatten().all(|s| s.asid != o) {
                    return Err(format!("frame {}: owner {o} holds no slot", f.frame));
                }
            }
            free += u64::from(f.free_slots());
            for s in f.slots.iter().flatten().filter(|s| s.state == SlotState::Allocated) {
                *per_asid.entry(s.asid).or_default() += 1;
            }
            let class = f.computed_class();
            if class != f.class {
                return Err(format!("frame {}: stale class", f.frame));
            }
            let listed = [
                self.empty.contains(&f.frame),
                self.partial.values().any(|s| s.contains(&f.frame)),
                self.full.contains(&f.frame),
                self.shared.contains(&f.frame),
            ];
            if listed.iter().filter(|x| **x).count() != 1 {
                return Err(format!("frame {} appears in {:?} lists", f.frame, listed));
            }
            let ok = match class {
                FrameClass::Empty => {
                    classes.0 += 1;
                    listed[0]
                }
                FrameClass::Partial(a) => {
                    classes.1 += 1;
                    self.partial.get(&a).is_some_and(|s| s.contains(&f.frame))
                }
                FrameClass::Full(_) => {
                    classes.2 += 1;
                    listed[2]
                }
                FrameClass::Shared => {
                    classes.3 += 1;
                    listed[3]
                }
            };
            if !ok {
                return Err(format!("frame {} listed under the wrong class", f.frame));
            }
        }
        if free != self.free_slots {
            return Err(format!("free slots {} but scan found {}", self.free_slots, free));
        }
        if free + self.used_slots() != self.total_slots() {
            return Err("slot conservation broken".into());
        }
        for (a, n) in &per_asid {
            if self.allocated_pages(*a) != *n {
                return Err(format!("asid {a}: {} allocated pages tracked, {n} found", self.allocated_pages(*a)));
            }
        }
        if self.empty.len() != classes.0 || self.full.len() != classes.2 || self.shared.len() != classes.3 {
            return Err("list sizes do not match scan".into());
        }
        Ok(())
    }
}
