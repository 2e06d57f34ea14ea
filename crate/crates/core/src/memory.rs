//! Ties the allocator, the per-application page tables, the coalescer and
//! compaction into the allocate/deallocate paths the engine drives.

use std::collections::{BTreeMap, BTreeSet};

use crate::allocator::{AllocPolicy, FrameAllocator, SlotState};
use crate::coalescer::{Coalescer, CoalescerConfig};
use crate::compaction::{self, CompactionConfig, CompactionOutcome, CompactionStats};
use crate::error::{AllocError, Result};
use crate::geometry::{Asid, FrameNum, PageGeometry, PageNum, VirtAddr};
use crate::page_table::PageTable;
use crate::tlb::TlbInvalidate;

/// Content tag of a page as it sits in CPU memory before transfer.
pub fn backing_tag(seed: u64, asid: Asid, vpage: PageNum) -> u64 {
    let mut z = seed ^ (u64::from(asid.0) << 48) ^ vpage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct MemoryConfig {
    pub geometry: PageGeometry,
    pub total_frames: u64,
    pub policy: AllocPolicy,
    pub coalescing: bool,
    /// `None` disables splintering-driven compaction.
    pub compaction: Option<CompactionConfig>,
    pub coalescer: CoalescerConfig,
    pub gpu_mmu_window: usize,
    pub content_seed: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            geometry: PageGeometry::default(),
            total_frames: 1536,
            policy: AllocPolicy::Cocoa,
            coalescing: true,
            compaction: Some(CompactionConfig::default()),
            coalescer: CoalescerConfig::default(),
            gpu_mmu_window: 8,
            content_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocOutcome {
    pub placements: Vec<(PageNum, PageNum)>,
    /// `(asid, vframe)` of frames coalesced after this batch.
    pub coalesced: Vec<(Asid, FrameNum)>,
    pub compaction: CompactionOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeallocOutcome {
    pub splintered: Vec<FrameNum>,
    pub compaction: CompactionOutcome,
}

#[derive(Debug, Clone)]
pub struct MemoryManager {
    config: MemoryConfig,
    alloc: FrameAllocator,
    tables: BTreeMap<Asid, PageTable>,
    coalescer: Coalescer,
    compaction_stats: CompactionStats,
}

impl MemoryManager {
    pub fn new(config: MemoryConfig) -> Self {
        let alloc = FrameAllocator::new(config.geometry, config.total_frames, config.policy)
            .with_gpu_mmu_window(config.gpu_mmu_window);
        Self {
            coalescer: Coalescer::new(config.coalescer),
            alloc,
            tables: BTreeMap::new(),
            compaction_stats: CompactionStats::default(),
            config,
        }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn geometry(&self) -> PageGeometry {
        self.config.geometry
    }

    pub fn allocator(&self) -> &FrameAllocator {
        &self.alloc
    }

    pub fn coalescer(&self) -> &Coalescer {
        &self.coalescer
    }

    pub fn compaction_stats(&self) -> CompactionStats {
        self.compaction_stats
    }

    pub fn table(&self, asid: Asid) -> Option<&PageTable> {
        self.tables.get(&asid)
    }

    pub fn tables(&self) -> impl Iterator<Item = &PageTable> {
        self.tables.values()
    }

    fn table_mut(&mut self, asid: Asid) -> &mut PageTable {
        let g = self.config.geometry;
        self.tables.entry(asid).or_insert_with(|| PageTable::new(asid, g))
    }

    /// True when `vpage` is mapped and still allocated (not a freed page
    /// lingering under a large mapping).
    pub fn is_resident(&self, asid: Asid, vpage: PageNum) -> bool {
        let Some(pt) = self.tables.get(&asid) else {
            return false;
        };
        match pt.walk_page(vpage).translation {
            Some(t) => self
                .alloc
                .slot_use(t.ppage)
                .is_some_and(|s| s.state == SlotState::Allocated),
            None => false,
        }
    }

    /// Allocates, maps and fills `n` pages, then runs the coalescer over the
    /// frames this batch touched.
    pub fn allocate(&mut self, asid: Asid, v_start: VirtAddr, n: u64, tlbs: &mut impl TlbInvalidate) -> Result<AllocOutcome> {
        let g = self.config.geometry;
        let first = g.base_page_of(v_start);
        if let Some(pt) = self.tables.get(&asid) {
            if let Some(vp) = (first..first + n).find(|&vp| pt.walk_page(vp).translation.is_some()) {
                return Err(crate::error::PageTableError::AlreadyMapped { vpage: vp }.into());
            }
        }
        let mut outcome = AllocOutcome::default();
        let placements = match (self.config.policy, self.config.compaction) {
            (AllocPolicy::Cocoa, Some(_)) => match self.alloc.allocate_strict(asid, v_start, n) {
                Err(AllocError::WouldViolateSoftGuarantee { .. }) => {
                    outcome.compaction = self.compact_all(tlbs)?;
                    self.alloc.allocate_en_masse(asid, v_start, n)?
                }
                other => other?,
            },
            _ => self.alloc.allocate_en_masse(asid, v_start, n)?,
        };
        let seed = self.config.content_seed;
        let pt = self.table_mut(asid);
        for &(vp, pp) in &placements {
            pt.map_base(vp, pp)?;
        }
        for &(vp, pp) in &placements {
            self.alloc.write_content(pp, backing_tag(seed, asid, vp));
        }
        let frames: BTreeSet<FrameNum> = placements.iter().map(|&(_, pp)| g.frame_of_page(pp)).collect();
        self.coalescer.notify(frames);
        outcome.coalesced = self
            .coalescer
            .run(&mut self.alloc, &mut self.tables, tlbs, self.config.coalescing);
        outcome.placements = placements;
        Ok(outcome)
    }

    /// Frees `n` pages. Pages under a large mapping stay reserved until
    /// their frame crosses the splinter threshold; splintered frames are
    /// then compacted.
    pub fn deallocate(&mut self, asid: Asid, v_start: VirtAddr, n: u64, tlbs: &mut impl TlbInvalidate) -> Result<DeallocOutcome> {
        let g = self.config.geometry;
        let first = g.base_page_of(v_start);
        let Some(pt) = self.tables.get(&asid) else {
            return Err(AllocError::Protection { asid, vpage: first }.into());
        };
        let mut targets = Vec::with_capacity(n as usize);
        for vp in first..first + n {
            match pt.walk_page(vp).translation {
                Some(t) if self.alloc.slot_use(t.ppage).is_some_and(|s| s.asid == asid && s.state == SlotState::Allocated) => {
                    targets.push((vp, t.ppage));
                }
                _ => return Err(AllocError::Protection { asid, vpage: vp }.into()),
            }
        }
        let mut touched_large = BTreeSet::new();
        // frames this call leaves fragmented: the only compaction sources
        let mut fragmented = BTreeSet::new();
        for (vp, pp) in targets {
            let frame = g.frame_of_page(pp);
            if self.alloc.frame(frame).coalesced {
                self.alloc.reserve(asid, vp, pp)?;
                touched_large.insert(frame);
            } else {
                fragmented.insert(frame);
                self.tables.get_mut(&asid).expect("checked").unmap_base(vp)?;
                self.alloc.release(asid, vp, pp)?;
                tlbs.flush_page(asid, vp);
            }
        }
        let mut outcome = DeallocOutcome::default();
        let slots = g.slots_per_large_frame();
        let threshold = self.config.compaction.unwrap_or_default();
        for frame in touched_large {
            let unallocated = u64::from(self.alloc.frame(frame).reserved());
            if threshold.should_splinter(unallocated, slots) {
                let pt = self.tables.get_mut(&asid).expect("checked");
                compaction::splinter(frame, &mut self.alloc, pt, tlbs)?;
                self.compaction_stats.splinters += 1;
                outcome.splintered.push(frame);
                fragmented.insert(frame);
            }
        }
        if let Some(cfg) = self.config.compaction {
            // as sparse as a frame CAC would splinter
            let alloc = &self.alloc;
            let sparse = |f: FrameNum| {
                let s = alloc.frame(f);
                fragmented.contains(&f) && cfg.should_splinter(u64::from(s.free_slots()), slots)
            };
            let sources = compaction::plan_among(alloc, asid, sparse);
            if !sources.is_empty() {
                let pt = self.tables.get_mut(&asid).expect("checked");
                let o = compaction::compact(&sources, &mut self.alloc, pt, tlbs, &cfg)?;
                self.compaction_stats.record(&o);
                outcome.compaction.absorb(o);
            }
            let low_water = (cfg.low_water_fraction * self.alloc.total_frames() as f64).ceil() as usize;
            if self.alloc.empty_frames() < low_water {
                outcome.compaction.absorb(self.compact_all(tlbs)?);
            }
        }
        Ok(outcome)
    }

    /// One compaction pass per owner.
    pub fn compact_all(&mut self, tlbs: &mut impl TlbInvalidate) -> Result<CompactionOutcome> {
        let cfg = self.config.compaction.unwrap_or_default();
        let mut total = CompactionOutcome::default();
        let asids: Vec<Asid> = self.tables.keys().copied().collect();
        for asid in asids {
            let sources = compaction::plan(&self.alloc, asid);
            if sources.is_empty() {
                continue;
            }
            let pt = self.tables.get_mut(&asid).expect("listed");
            let o = compaction::compact(&sources, &mut self.alloc, pt, tlbs, &cfg)?;
            self.compaction_stats.record(&o);
            total.absorb(o);
        }
        Ok(total)
    }

    /// Radix walk versus flat oracle for one page.
    pub fn oracle_agrees(&self, asid: Asid, vpage: PageNum) -> bool {
        self.tables.get(&asid).is_none_or(|pt| pt.agrees_with_oracle(vpage))
    }

    /// Checks that every mapping points at a slot holding exactly that page
    /// with its original content, and that no slot is orphaned. Returns the
    /// number of violations.
    pub fn verify_contents(&self) -> u64 {
        let seed = self.config.content_seed;
        let mut violations = 0;
        let mut mapped = 0u64;
        for pt in self.tables.values() {
            for (vp, pp) in pt.mappings() {
                mapped += 1;
                match self.alloc.slot_use(pp) {
                    Some(s) if s.asid == pt.asid() && s.vpage == vp && s.content == backing_tag(seed, s.asid, vp) => {}
                    _ => violations += 1,
                }
                if pt.oracle().get(pt.asid(), vp) != Some(pp) {
                    violations += 1;
                }
            }
        }
        if mapped != self.alloc.used_slots() {
            violations += mapped.abs_diff(self.alloc.used_slots());
        }
        violations
    }

    /// Multiset of `(asid, vpage, content)` over allocated pages.
    pub fn content_multiset(&self) -> Vec<(Asid, PageNum, u64)> {
        let mut out: Vec<_> = self
            .alloc
            .frames()
            .iter()
            .flat_map(|f| f.slots().iter().flatten())
            .filter(|s| s.state == SlotState::Allocated)
            .map(|s| (s.asid, s.vpage, s.content))
            .collect();
        out.sort_unstable();
        out
    }
}
