//! Per-core L1 TLBs and a shared L2 TLB, each with separate base-page and
//! large-page arrays, plus the MSHRs that merge misses into one walk.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::geometry::{Asid, FrameNum, PageGeometry, PageNum};
use crate::page_table::{PageSize, Translation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlbConfig {
    pub l1_base_entries: usize,
    pub l1_base_ways: usize,
    pub l1_large_entries: usize,
    pub l1_large_ways: usize,
    pub l1_latency: u64,
    pub l2_base_entries: usize,
    pub l2_base_ways: usize,
    pub l2_large_entries: usize,
    pub l2_large_ways: usize,
    pub l2_latency: u64,
    /// Lookups the shared L2 TLB accepts per cycle.
    pub l2_ports: usize,
    pub mshr_capacity: usize,
}

impl Default for TlbConfig {
    fn default() -> Self {
        Self {
            l1_base_entries: 128,
            l1_base_ways: 128,
            l1_large_entries: 16,
            l1_large_ways: 16,
            l1_latency: 1,
            l2_base_entries: 512,
            l2_base_ways: 16,
            l2_large_entries: 256,
            l2_large_ways: 256,
            l2_latency: 10,
            l2_ports: 2,
            mshr_capacity: 64,
        }
    }
}

impl TlbConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let arrays = [
            ("l1_base", self.l1_base_entries, self.l1_base_ways),
            ("l1_large", self.l1_large_entries, self.l1_large_ways),
            ("l2_base", self.l2_base_entries, self.l2_base_ways),
            ("l2_large", self.l2_large_entries, self.l2_large_ways),
        ];
        for (name, entries, ways) in arrays {
            if entries == 0 {
                return Err(ConfigError::invalid(
                    format!("tlb.{name}_entries"),
                    "must be greater than zero",
                ));
            }
            if ways == 0 || entries % ways != 0 {
                return Err(ConfigError::invalid(
                    format!("tlb.{name}_ways"),
                    format!("associativity must divide the entry count ({entries})"),
                ));
            }
        }
        if self.l2_ports == 0 {
            return Err(ConfigError::invalid("tlb.l2_ports", "must be at least 1"));
        }
        if self.mshr_capacity == 0 {
            return Err(ConfigError::invalid("tlb.mshr_capacity", "must be at least 1"));
        }
        Ok(())
    }
}

/// Bytes of memory covered by each TLB array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbReach {
    pub l1_base_bytes: u64,
    pub l1_large_bytes: u64,
    pub l2_base_bytes: u64,
    pub l2_large_bytes: u64,
}

pub fn reach(config: &TlbConfig, geometry: &PageGeometry) -> TlbReach {
    let b = geometry.base_page_bytes;
    let l = geometry.large_page_bytes;
    TlbReach {
        l1_base_bytes: config.l1_base_entries as u64 * b,
        l1_large_bytes: config.l1_large_entries as u64 * l,
        l2_base_bytes: config.l2_base_entries as u64 * b,
        l2_large_bytes: config.l2_large_entries as u64 * l,
    }
}

/// A cached translation. `tag`/`target` are base pages for base entries and
/// large frames for large entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub asid: Asid,
    pub tag: u64,
    pub target: u64,
    pub size: PageSize,
}

impl TlbEntry {
    pub fn from_translation(asid: Asid, vpage: PageNum, t: Translation, g: &PageGeometry) -> Self {
        match t.size {
            PageSize::Base => Self {
                asid,
                tag: vpage,
                target: t.ppage,
                size: PageSize::Base,
            },
            PageSize::Large => Self {
                asid,
                tag: g.frame_of_page(vpage),
                target: g.frame_of_page(t.ppage),
                size: PageSize::Large,
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Way {
    asid: Asid,
    tag: u64,
    target: u64,
    last_use: u64,
    valid: bool,
}

const INVALID_WAY: Way = Way {
    asid: Asid(0),
    tag: 0,
    target: 0,
    last_use: 0,
    valid: false,
};

/// Set-associative array with true LRU replacement (fully associative when
/// `ways == entries`).
#[derive(Debug, Clone)]
pub struct TlbArray {
    sets: usize,
    ways: usize,
    slots: Vec<Way>,
    index: FxHashMap<(Asid, u64), usize>,
    clock: u64,
}

impl TlbArray {
    pub fn new(entries: usize, ways: usize) -> Self {
        Self {
            sets: entries / ways,
            ways,
            slots: vec![INVALID_WAY; entries],
            index: FxHashMap::default(),
            clock: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Returns the cached target and refreshes recency.
    pub fn lookup(&mut self, asid: Asid, tag: u64) -> Option<u64> {
        let &slot = self.index.get(&(asid, tag))?;
        self.clock += 1;
        self.slots[slot].last_use = self.clock;
        Some(self.slots[slot].target)
    }

    pub fn contains(&self, asid: Asid, tag: u64) -> bool {
        self.index.contains_key(&(asid, tag))
    }

    /// Inserts or refreshes an entry; returns the evicted `(asid, tag)`.
    pub fn fill(&mut self, asid: Asid, tag: u64, target: u64) -> Option<(Asid, u64)> {
        self.clock += 1;
        if let Some(&slot) = self.index.get(&(asid, tag)) {
            let w = &mut self.slots[slot];
            w.target = target;
            w.last_use = self.clock;
            return None;
        }
        let set = (tag % self.sets as u64) as usize;
        let range = set * self.ways..(set + 1) * self.ways;
        let victim = self.slots[range.clone()]
            .iter()
            .position(|w| !w.valid)
            .map(|i| range.start + i)
            .unwrap_or_else(|| {
                range
                    .clone()
                    .min_by_key(|&i| self.slots[i].last_use)
                    .expect("non-empty set")
            });
        let old = self.slots[victim];
        let evicted = if old.valid {
            self.index.remove(&(old.asid, old.tag));
            Some((old.asid, old.tag))
        } else {
            None
        };
        self.slots[victim] = Way {
            asid,
            tag,
            target,
            last_use: self.clock,
            valid: true,
        };
        self.index.insert((asid, tag), victim);
        evicted
    }

    pub fn invalidate(&mut self, asid: Asid, tag: u64) -> bool {
        match self.index.remove(&(asid, tag)) {
            Some(slot) => {
                self.slots[slot].valid = false;
                true
            }
            None => false,
        }
    }

    pub fn invalidate_asid(&mut self, asid: Asid) -> usize {
        let mut n = 0;
        for w in self.slots.iter_mut().filter(|w| w.valid && w.asid == asid) {
            w.valid = false;
            self.index.remove(&(w.asid, w.tag));
            n += 1;
        }
        n
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LevelStats {
    pub hits: u64,
    pub misses: u64,
}

impl LevelStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> Option<f64> {
        (self.lookups() > 0).then(|| self.hits as f64 / self.lookups() as f64)
    }

    pub fn add(&mut self, other: &LevelStats) {
        self.hits += other.hits;
        self.misses += other.misses;
    }

    fn record(&mut self, hit: bool) {
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitLevel {
    L1,
    L2,
    Miss,
}

/// Outcome of probing one TLB level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub translation: Option<Translation>,
    /// Cycle at which the probe result is available (port queueing included).
    pub ready_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LookupResult {
    pub hit_level: HitLevel,
    pub latency: u64,
    pub translation: Option<Translation>,
}

#[derive(Debug, Clone)]
struct L1Tlb {
    base: TlbArray,
    large: TlbArray,
    port_free_at: u64,
    stats: LevelStats,
}

/// Invalidation hooks used by coalescing, splintering and compaction.
pub trait TlbInvalidate {
    /// Drops every entry (both sizes) covering virtual frame `vframe`.
    fn flush_frame(&mut self, asid: Asid, vframe: FrameNum);
    /// Drops the entries (both sizes) that translate `vpage`.
    fn flush_page(&mut self, asid: Asid, vpage: PageNum);
    fn flush_asid(&mut self, asid: Asid);
}

/// No-op invalidation sink for users without a TLB model.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoTlb;

impl TlbInvalidate for NoTlb {
    fn flush_frame(&mut self, _: Asid, _: FrameNum) {}
    fn flush_page(&mut self, _: Asid, _: PageNum) {}
    fn flush_asid(&mut self, _: Asid) {}
}

#[derive(Debug, Clone)]
pub struct TlbHierarchy {
    config: TlbConfig,
    geometry: PageGeometry,
    l1: Vec<L1Tlb>,
    l2_base: TlbArray,
    l2_large: TlbArray,
    l2_port_cycle: u64,
    l2_port_used: usize,
    l2_stats: LevelStats,
    flushes: u64,
}

impl TlbHierarchy {
    pub fn new(config: TlbConfig, geometry: PageGeometry, cores: usize) -> Self {
        let l1 = (0..cores)
            .map(|_| L1Tlb {
                base: TlbArray::new(config.l1_base_entries, config.l1_base_ways),
                large: TlbArray::new(config.l1_large_entries, config.l1_large_ways),
                port_free_at: 0,
                stats: LevelStats::default(),
            })
            .collect();
        Self {
            l2_base: TlbArray::new(config.l2_base_entries, config.l2_base_ways),
            l2_large: TlbArray::new(config.l2_large_entries, config.l2_large_ways),
            config,
            geometry,
            l1,
            l2_port_cycle: 0,
            l2_port_used: 0,
            l2_stats: LevelStats::default(),
            flushes: 0,
        }
    }

    pub fn config(&self) -> &TlbConfig {
        &self.config
    }

    pub fn cores(&self) -> usize {
        self.l1.len()
    }

    fn probe_arrays(g: &PageGeometry, large: &mut TlbArray, base: &mut TlbArray, asid: Asid, vpage: PageNum) -> Option<Translation> {
        let vframe = g.frame_of_page(vpage);
        if let Some(pframe) = large.lookup(asid, vframe) {
            return Some(Translation {
                ppage: g.first_page_of_frame(pframe) + g.slot_of_page(vpage),
                size: PageSize::Large,
            });
        }
        base.lookup(asid, vpage).map(|ppage| Translation {
            ppage,
            size: PageSize::Base,
        })
    }

    /// Probes the core's L1 (large array, then base array). One probe per
    /// core per cycle; callers must present requests in non-decreasing `now`.
    pub fn probe_l1(&mut self, core: usize, asid: Asid, vpage: PageNum, now: u64) -> Probe {
        let g = self.geometry;
        let lat = self.config.l1_latency;
        let l1 = &mut self.l1[core];
        let start = now.max(l1.port_free_at);
        l1.port_free_at = start + 1;
        let translation = Self::probe_arrays(&g, &mut l1.large, &mut l1.base, asid, vpage);
        l1.stats.record(translation.is_some());
        Probe {
            translation,
            ready_at: start + lat,
        }
    }

    /// Probes the shared L2 (large, then base); `l2_ports` probes per cycle.
    pub fn probe_l2(&mut self, asid: Asid, vpage: PageNum, now: u64) -> Probe {
        let start = if now > self.l2_port_cycle {
            self.l2_port_cycle = now;
            self.l2_port_used = 1;
            now
        } else if self.l2_port_used < self.config.l2_ports {
            self.l2_port_used += 1;
            self.l2_port_cycle
        } else {
            self.l2_port_cycle += 1;
            self.l2_port_used = 1;
            self.l2_port_cycle
        };
        let g = self.geometry;
        let translation = Self::probe_arrays(&g, &mut self.l2_large, &mut self.l2_base, asid, vpage);
        self.l2_stats.record(translation.is_some());
        Probe {
            translation,
            ready_at: start + self.config.l2_latency,
        }
    }

    /// Full L1 then L2 lookup. A hit in L2 refills the core's L1.
    pub fn lookup(&mut self, core: usize, asid: Asid, vpage: PageNum, now: u64) -> LookupResult {
        let p1 = self.probe_l1(core, asid, vpage, now);
        if let Some(t) = p1.translation {
            return LookupResult {
                hit_level: HitLevel::L1,
                latency: p1.ready_at - now,
                translation: Some(t),
            };
        }
        let p2 = self.probe_l2(asid, vpage, p1.ready_at);
        match p2.translation {
            Some(t) => {
                self.fill_l1(core, TlbEntry::from_translation(asid, vpage, t, &self.geometry));
                LookupResult {
                    hit_level: HitLevel::L2,
                    latency: p2.ready_at - now,
                    translation: Some(t),
                }
            }
            None => LookupResult {
                hit_level: HitLevel::Miss,
                latency: p2.ready_at - now,
                translation: None,
            },
        }
    }

    pub fn fill_l1(&mut self, core: usize, e: TlbEntry) {
        let l1 = &mut self.l1[core];
        match e.size {
            PageSize::Base => l1.base.fill(e.asid, e.tag, e.target),
            PageSize::Large => l1.large.fill(e.asid, e.tag, e.target),
        };
    }

    pub fn fill_l2(&mut self, e: TlbEntry) {
        match e.size {
            PageSize::Base => self.l2_base.fill(e.asid, e.tag, e.target),
            PageSize::Large => self.l2_large.fill(e.asid, e.tag, e.target),
        };
    }

    /// Counts an always-hit L1 lookup (ideal-TLB mode).
    pub fn record_ideal_hit(&mut self, core: usize) {
        self.l1[core].stats.record(true);
    }

    pub fn l1_stats(&self, core: usize) -> LevelStats {
        self.l1[core].stats
    }

    pub fn l1_total(&self) -> LevelStats {
        let mut s = LevelStats::default();
        for l1 in &self.l1 {
            s.add(&l1.stats);
        }
        s
    }

    pub fn l2_stats(&self) -> LevelStats {
        self.l2_stats
    }

    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    pub fn l1_contains(&self, core: usize, asid: Asid, size: PageSize, tag: u64) -> bool {
        match size {
            PageSize::Base => self.l1[core].base.contains(asid, tag),
            PageSize::Large => self.l1[core].large.contains(asid, tag),
        }
    }

    pub fn l2_contains(&self, asid: Asid, size: PageSize, tag: u64) -> bool {
        match size {
            PageSize::Base => self.l2_base.contains(asid, tag),
            PageSize::Large => self.l2_large.contains(asid, tag),
        }
    }

    fn arrays_mut(&mut self) -> impl Iterator<Item = (&mut TlbArray, &mut TlbArray)> {
        self.l1
            .iter_mut()
            .map(|l| (&mut l.large, &mut l.base))
            .chain(std::iter::once((&mut self.l2_large, &mut self.l2_base)))
    }
}

impl TlbInvalidate for TlbHierarchy {
    fn flush_frame(&mut self, asid: Asid, vframe: FrameNum) {
        self.flushes += 1;
        let first = self.geometry.first_page_of_frame(vframe);
        let n = self.geometry.slots_per_large_frame();
        for (large, base) in self.arrays_mut() {
            large.invalidate(asid, vframe);
            if !base.is_empty() {
                for vp in first..first + n {
                    base.invalidate(asid, vp);
                }
            }
        }
    }

    fn flush_page(&mut self, asid: Asid, vpage: PageNum) {
        self.flushes += 1;
        let vframe = self.geometry.frame_of_page(vpage);
        for (large, base) in self.arrays_mut() {
            large.invalidate(asid, vframe);
            base.invalidate(asid, vpage);
        }
    }

    fn flush_asid(&mut self, asid: Asid) {
        self.flushes += 1;
        for (large, base) in self.arrays_mut() {
            large.invalidate_asid(asid);
            base.invalidate_asid(asid);
        }
    }
}

/// Key of an outstanding miss: one walk per key is in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MshrKey {
    pub asid: Asid,
    pub size: PageSize,
    pub tag: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MshrOutcome {
    /// New entry; the caller must start a walk.
    Allocated,
    /// Joined an in-flight walk.
    Merged,
    /// No free MSHR; the caller must retry later.
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MshrStats {
    pub allocations: u64,
    pub merges: u64,
    pub full_stalls: u64,
}

#[derive(Debug, Clone)]
pub struct MshrSet<W> {
    capacity: usize,
    entries: FxHashMap<MshrKey, Vec<W>>,
    stats: MshrStats,
}

impl<W> MshrSet<W> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: FxHashMap::default(),
            stats: MshrStats::default(),
        }
    }

    pub fn register(&mut self, key: MshrKey, waiter: W) -> MshrOutcome {
        if let Some(waiters) = self.entries.get_mut(&key) {
            waiters.push(waiter);
            self.stats.merges += 1;
            return MshrOutcome::Merged;
        }
        if self.entries.len() >= self.capacity {
            self.stats.full_stalls += 1;
            return MshrOutcome::Full;
        }
        self.entries.insert(key, vec![waiter]);
        self.stats.allocations += 1;
        MshrOutcome::Allocated
    }

    /// Releases every waiter of `key`, in arrival order.
    pub fn release(&mut self, key: &MshrKey) -> Vec<W> {
        self.entries.remove(key).unwrap_or_default()
    }

    pub fn in_flight(&self) -> usize {
        self.entries.len()
    }

    pub fn is_pending(&self, key: &MshrKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn stats(&self) -> MshrStats {
        self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    /// Straightforward fully-associative LRU used as the reference model.
    struct ReferenceLru {
        cap: usize,
        order: VecDeque<u64>,
    }

    impl ReferenceLru {
        fn access(&mut self, tag: u64) -> bool {
            if let Some(i) = self.order.iter().position(|&t| t == tag) {
                self.order.remove(i);
                self.order.push_back(tag);
                true
            } else {
                if self.order.len() == self.cap {
                    self.order.pop_front();
                }
                self.order.push_back(tag);
                false
            }
        }
    }

    fn base_translation(ppage: u64) -> Translation {
        Translation {
            ppage,
            size: PageSize::Base,
        }
    }

    fn hierarchy() -> TlbHierarchy {
        TlbHierarchy::new(TlbConfig::default(), PageGeometry::default(), 2)
    }

    /// Drives the L1 base array the way the engine does: probe, fill on miss.
    fn replay_l1(stream: &[u64]) -> Vec<bool> {
        let mut t = hierarchy();
        let g = PageGeometry::default();
        stream
            .iter()
            .enumerate()
            .map(|(i, &vp)| {
                let hit = t.probe_l1(0, Asid(0), vp, i as u64).translation.is_some();
                if !hit {
                    t.fill_l1(0, TlbEntry::from_translation(Asid(0), vp, base_translation(vp + 1000), &g));
                }
                hit
            })
            .collect()
    }

    #[test]
    fn second_access_hits_l1_in_one_cycle() {
        let mut t = hierarchy();
        let g = PageGeometry::default();
        let r = t.lookup(0, Asid(1), 42, 0);
        assert_eq!(r.hit_level, HitLevel::Miss);
        assert_eq!(r.latency, 11);
        let e = TlbEntry::from_translation(Asid(1), 42, base_translation(9), &g);
        t.fill_l2(e);
        t.fill_l1(0, e);
        let r = t.lookup(0, Asid(1), 42, 100);
        assert_eq!(r.hit_level, HitLevel::L1);
        assert_eq!(r.latency, 1);
        assert_eq!(r.translation.unwrap().ppage, 9);
    }

    #[test]
    fn one_large_entry_serves_all_512_pages() {
        let mut t = hierarchy();
        let g = PageGeometry::default();
        let e = TlbEntry::from_translation(
            Asid(0),
            5 * 512 + 17,
            Translation {
                ppage: 9 * 512 + 17,
                size: PageSize::Large,
            },
            &g,
        );
        assert_eq!((e.tag, e.target), (5, 9));
        t.fill_l1(0, e);
        for s in 0..512 {
            let r = t.lookup(0, Asid(0), 5 * 512 + s, 1000 + s);
            assert_eq!(r.hit_level, HitLevel::L1);
            assert_eq!(r.translation.unwrap().ppage, 9 * 512 + s);
        }
        assert_eq!(t.l1_stats(0).hits, 512);
    }

    #[test]
    fn round_robin_over_capacity_plus_one_always_misses() {
        let stream: Vec<u64> = (0..129u64).cycle().take(129 * 20).collect();
        let hits = replay_l1(&stream);
        let mut reference = ReferenceLru {
            cap: 128,
            order: VecDeque::new(),
        };
        let expected: Vec<bool> = stream.iter().map(|&v| reference.access(v)).collect();
        assert_eq!(hits, expected);
        let miss_rate = hits.iter().filter(|h| !**h).count() as f64 / hits.len() as f64;
        assert_eq!(miss_rate, 1.0);
    }

    #[test]
    fn random_stream_matches_reference_lru() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stream: Vec<u64> = (0..20_000).map(|_| rng.gen_range(0..200u64)).collect();
        let hits = replay_l1(&stream);
        let mut reference = ReferenceLru {
            cap: 128,
            order: VecDeque::new(),
        };
        let expected: Vec<bool> = stream.iter().map(|&v| reference.access(v)).collect();
        assert_eq!(hits, expected);
    }

    #[test]
    fn full_large_array_evicts_least_recent() {
        let mut a = TlbArray::new(16, 16);
        for tag in 0..16 {
            assert_eq!(a.fill(Asid(0), tag, tag), None);
        }
        a.lookup(Asid(0), 0);
        assert_eq!(a.fill(Asid(0), 99, 0), Some((Asid(0), 1)));
        assert!(a.contains(Asid(0), 0));
        assert!(!a.contains(Asid(0), 1));
    }

    #[test]
    fn set_associative_eviction_stays_in_set() {
        let mut a = TlbArray::new(512, 16);
        // 32 sets; tags congruent mod 32 share a set.
        for i in 0..16 {
            a.fill(Asid(0), i * 32, i);
        }
        a.fill(Asid(0), 1, 1);
        assert_eq!(a.fill(Asid(0), 16 * 32, 0), Some((Asid(0), 0)));
        assert!(a.contains(Asid(0), 1));
    }

    #[test]
    fn flush_frame_drops_both_sizes_everywhere() {
        let mut t = hierarchy();
        let g = PageGeometry::default();
        let base = TlbEntry::from_translation(Asid(3), 512 + 4, base_translation(77), &g);
        let large = TlbEntry {
            asid: Asid(3),
            tag: 1,
            target: 2,
            size: PageSize::Large,
        };
        for core in 0..2 {
            t.fill_l1(core, base);
            t.fill_l1(core, large);
        }
        t.fill_l2(base);
        t.fill_l2(large);
        t.flush_frame(Asid(3), 1);
        assert_eq!(t.lookup(0, Asid(3), 512 + 4, 0).hit_level, HitLevel::Miss);
        assert_eq!(t.lookup(1, Asid(3), 512 + 9, 0).hit_level, HitLevel::Miss);
    }

    #[test]
    fn flush_asid_leaves_other_asids() {
        let mut t = hierarchy();
        let g = PageGeometry::default();
        t.fill_l1(0, TlbEntry::from_translation(Asid(1), 1, base_translation(1), &g));
        t.fill_l1(0, TlbEntry::from_translation(Asid(2), 1, base_translation(2), &g));
        t.flush_asid(Asid(1));
        assert_eq!(t.lookup(0, Asid(1), 1, 0).hit_level, HitLevel::Miss);
        assert_eq!(t.lookup(0, Asid(2), 1, 5).hit_level, HitLevel::L1);
    }

    #[test]
    fn l2_hit_does_not_require_l1_inclusion() {
        let mut t = hierarchy();
        let g = PageGeometry::default();
        let e = TlbEntry::from_translation(Asid(0), 8, base_translation(8), &g);
        t.fill_l1(1, e);
        assert!(!t.l2_contains(Asid(0), PageSize::Base, 8));
        assert_eq!(t.lookup(1, Asid(0), 8, 0).hit_level, HitLevel::L1);
        t.fill_l2(e);
        let r = t.lookup(0, Asid(0), 8, 1);
        assert_eq!(r.hit_level, HitLevel::L2);
        assert_eq!(r.latency, 11);
        assert!(t.l1_contains(0, Asid(0), PageSize::Base, 8));
    }

    #[test]
    fn l1_port_serializes_same_cycle_probes() {
        let mut t = hierarchy();
        let a = t.probe_l1(0, Asid(0), 1, 10);
        let b = t.probe_l1(0, Asid(0), 2, 10);
        let c = t.probe_l1(1, Asid(0), 3, 10);
        assert_eq!((a.ready_at, b.ready_at, c.ready_at), (11, 12, 11));
    }

    #[test]
    fn l2_accepts_two_probes_per_cycle() {
        let mut t = hierarchy();
        let ready: Vec<u64> = (0..5).map(|i| t.probe_l2(Asid(0), i, 0).ready_at).collect();
        assert_eq!(ready, vec![10, 10, 11, 11, 12]);
        assert_eq!(t.probe_l2(Asid(0), 9, 50).ready_at, 60);
    }

    #[test]
    fn counters_sum_to_lookups() {
        let mut t = hierarchy();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = PageGeometry::default();
        for i in 0..5000u64 {
            let vp = rng.gen_range(0..300);
            let core = (i % 2) as usize;
            if t.lookup(core, Asid(0), vp, i).hit_level == HitLevel::Miss {
                let e = TlbEntry::from_translation(Asid(0), vp, base_translation(vp), &g);
                t.fill_l2(e);
                t.fill_l1(core, e);
            }
        }
        assert_eq!(t.l1_total().lookups(), 5000);
        assert_eq!(t.l2_stats().lookups(), t.l1_total().misses);
    }

    #[test]
    fn mshr_merges_concurrent_misses() {
        let mut m = MshrSet::new(64);
        let key = MshrKey {
            asid: Asid(0),
            size: PageSize::Base,
            tag: 12,
        };
        let outcomes: Vec<_> = (0..10).map(|w| m.register(key, w)).collect();
        assert_eq!(outcomes.iter().filter(|o| **o == MshrOutcome::Allocated).count(), 1);
        assert_eq!(m.release(&key), (0..10).collect::<Vec<_>>());
        assert_eq!(m.in_flight(), 0);
    }

    #[test]
    fn mshr_capacity_is_enforced() {
        let mut m = MshrSet::new(2);
        let k = |tag| MshrKey {
            asid: Asid(0),
            size: PageSize::Base,
            tag,
        };
        assert_eq!(m.register(k(1), ()), MshrOutcome::Allocated);
        assert_eq!(m.register(k(2), ()), MshrOutcome::Allocated);
        assert_eq!(m.register(k(3), ()), MshrOutcome::Full);
        assert_eq!(m.register(k(2), ()), MshrOutcome::Merged);
    }

    #[test]
    fn reach_from_default_config() {
        let r = reach(&TlbConfig::default(), &PageGeometry::default());
        assert_eq!(r.l1_base_bytes, 512 * 1024);
        assert_eq!(r.l1_large_bytes, 32 * 1024 * 1024);
        assert_eq!(r.l2_base_bytes, 2 * 1024 * 1024);
        assert_eq!(r.l2_large_bytes, 512 * 1024 * 1024);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = TlbConfig {
            l1_base_entries: 0,
            ..TlbConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("l1_base_entries"), "{err}");
        let cfg = TlbConfig {
            l2_base_ways: 7,
            ..TlbConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("l2_base_ways"));
    }
}
