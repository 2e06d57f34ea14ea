//! Demand paging: the CPU→GPU bus, declared buffers and in-flight transfers.

use std::collections::BTreeMap;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error, Result};
use crate::geometry::{Asid, PageGeometry, PageNum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoBusConfig {
    pub overhead_cycles: u64,
    pub bytes_per_cycle: u64,
}

impl Default for IoBusConfig {
    fn default() -> Self {
        Self {
            overhead_cycles: 20_000,
            bytes_per_cycle: 16,
        }
    }
}

impl IoBusConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.bytes_per_cycle == 0 {
            return Err(ConfigError::invalid("bus.bytes_per_cycle", "must be positive"));
        }
        Ok(())
    }

    pub fn transfer_latency(&self, bytes: u64) -> u64 {
        self.overhead_cycles + bytes.div_ceil(self.bytes_per_cycle)
    }
}

/// Serialized FIFO bus: one transfer at a time.
#[derive(Debug, Clone, Default)]
pub struct IoBusModel {
    config: IoBusConfig,
    free_at: u64,
    transfers: u64,
    bytes: u64,
    /// (bytes, service cycles) -> transfers
    log: BTreeMap<(u64, u64), u64>,
}

impl IoBusModel {
    pub fn new(config: IoBusConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn config(&self) -> &IoBusConfig {
        &self.config
    }

    /// Enqueues a transfer requested at `now`; returns its completion cycle.
    pub fn submit(&mut self, now: u64, bytes: u64) -> u64 {
        let start = now.max(self.free_at);
        self.free_at = start + self.config.transfer_latency(bytes);
        *self.log.entry((bytes, self.free_at - start)).or_default() += 1;
        self.transfers += 1;
        self.bytes += bytes;
        self.free_at
    }

    pub fn transfers(&self) -> u64 {
        self.transfers
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// `(bytes, service cycles, count)` over every transfer so far.
    pub fn log(&self) -> Vec<(u64, u64, u64)> {
        self.log.iter().map(|(&(b, c), &n)| (b, c, n)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PagingMode {
    /// Fault in one base page at a time.
    DemandBase,
    /// Fault in the whole large frame around the touched page.
    DemandLarge,
    /// Everything transferred before execution starts.
    #[default]
    Prefault,
}

impl PagingMode {
    pub fn label(self) -> &'static str {
        match self {
            PagingMode::DemandBase => "demand_base",
            PagingMode::DemandLarge => "demand_large",
            PagingMode::Prefault => "prefault",
        }
    }

    pub fn is_demand(self) -> bool {
        self != PagingMode::Prefault
    }
}

impl std::str::FromStr for PagingMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "demand_base" => Ok(PagingMode::DemandBase),
            "demand_large" => Ok(PagingMode::DemandLarge),
            "prefault" => Ok(PagingMode::Prefault),
            _ => Err(ConfigError::invalid("paging", format!("unknown paging mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PagingStats {
    pub faults: u64,
    pub transfers: u64,
    pub bytes_over_bus: u64,
    /// Summed wait of every warp stalled on a transfer.
    pub fault_stall_cycles: u64,
    pub prefault_bytes: u64,
    pub prefault_cycles: u64,
}

/// A pending transfer: the pages it brings in and who waits for it.
#[derive(Debug, Clone)]
pub struct Transfer<W> {
    pub asid: Asid,
    pub pages: Vec<PageNum>,
    pub done: u64,
    pub waiters: Vec<(W, u64)>,
}

/// Result of a fault: either a new transfer to schedule or a join.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultOutcome {
    Started { id: u64, done: u64 },
    Joined { id: u64 },
}

/// Declared virtual buffers per asid plus in-flight transfer bookkeeping.
/// Residency itself is the page table's job.
#[derive(Debug, Clone)]
pub struct Pager<W> {
    mode: PagingMode,
    geometry: PageGeometry,
    bus: IoBusModel,
    /// asid → (first page → one-past-last page)
    declared: BTreeMap<Asid, BTreeMap<PageNum, PageNum>>,
    in_flight: FxHashMap<(Asid, PageNum), u64>,
    transfers: FxHashMap<u64, Transfer<W>>,
    next_id: u64,
    per_asid: BTreeMap<Asid, PagingStats>,
}

impl<W> Pager<W> {
    pub fn new(mode: PagingMode, geometry: PageGeometry, bus: IoBusConfig) -> Self {
        Self {
            mode,
            geometry,
            bus: IoBusModel::new(bus),
            declared: BTreeMap::new(),
            in_flight: FxHashMap::default(),
            transfers: FxHashMap::default(),
            next_id: 0,
            per_asid: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> PagingMode {
        self.mode
    }

    pub fn bus(&self) -> &IoBusModel {
        &self.bus
    }

    pub fn declare(&mut self, asid: Asid, first: PageNum, pages: u64) {
        self.declared.entry(asid).or_default().insert(first, first + pages);
    }

    pub fn retire(&mut self, asid: Asid, first: PageNum) {
        if let Some(m) = self.declared.get_mut(&asid) {
            m.remove(&first);
        }
    }

    pub fn is_declared(&self, asid: Asid, vpage: PageNum) -> bool {
        self.declared
            .get(&asid)
            .and_then(|m| m.range(..=vpage).next_back())
            .is_some_and(|(_, &end)| vpage < end)
    }

    pub fn stats(&self, asid: Asid) -> PagingStats {
        self.per_asid.get(&asid).copied().unwrap_or_default()
    }

    pub fn total_stats(&self) -> PagingStats {
        self.per_asid.values().fold(PagingStats::default(), |mut a, s| {
            a.faults += s.faults;
            a.transfers += s.transfers;
            a.bytes_over_bus += s.bytes_over_bus;
            a.fault_stall_cycles += s.fault_stall_cycles;
            a.prefault_bytes += s.prefault_bytes;
            a.prefault_cycles += s.prefault_cycles;
            a
        })
    }

    pub fn in_flight(&self) -> usize {
        self.transfers.len()
    }

    /// Charges an up-front transfer of `pages` base pages (not part of
    /// execution time).
    pub fn prefault(&mut self, asid: Asid, pages: u64) {
        let bytes = pages * self.geometry.base_page_bytes;
        let s = self.per_asid.entry(asid).or_default();
        s.prefault_bytes += bytes;
        s.prefault_cycles += self.bus.config.transfer_latency(bytes);
    }

    /// Handles a miss on a non-resident page at `now`. `resident` reports
    /// whether a page of the asid is already resident (used to trim
    /// large-granularity transfers).
    pub fn fault(&mut self, asid: Asid, vpage: PageNum, now: u64, waiter: W, resident: impl Fn(PageNum) -> bool) -> Result<FaultOutcome> {
        if !self.is_declared(asid, vpage) {
            return Err(Error::Protection {
                asid,
                vaddr: vpage * self.geometry.base_page_bytes,
            });
        }
        let stats = self.per_asid.entry(asid).or_default();
        stats.faults += 1;
        if let Some(&id) = self.in_flight.get(&(asid, vpage)) {
            self.transfers.get_mut(&id).expect("in-flight transfer").waiters.push((waiter, now));
            return Ok(FaultOutcome::Joined { id });
        }
        let pages: Vec<PageNum> = match self.mode {
            PagingMode::DemandLarge => {
                let g = self.geometry;
                let first = g.first_page_of_frame(g.frame_of_page(vpage));
                (first..first + g.slots_per_large_frame())
                    .filter(|&p| p == vpage || (self.is_declared(asid, p) && !resident(p) && !self.in_flight.contains_key(&(asid, p))))
                    .collect()
            }
            _ => vec![vpage],
        };
        let bytes = pages.len() as u64 * self.geometry.base_page_bytes;
        let done = self.bus.submit(now, bytes);
        let id = self.next_id;
        self.next_id += 1;
        for &p in &pages {
            self.in_flight.insert((asid, p), id);
        }
        let stats = self.per_asid.entry(asid).or_default();
        stats.transfers += 1;
        stats.bytes_over_bus += bytes;
        self.transfers.insert(
            id,
            Transfer {
                asid,
                pages,
                done,
                waiters: vec![(waiter, now)],
            },
        );
        Ok(FaultOutcome::Started { id, done })
    }

    /// Completes transfer `id`; the caller maps the returned pages and then
    /// releases the waiters.
    pub fn complete(&mut self, id: u64) -> Transfer<W> {
        let t = self.transfers.remove(&id).expect("unknown transfer");
        for p in &t.pages {
            self.in_flight.remove(&(t.asid, *p));
        }
        let stats = self.per_asid.entry(t.asid).or_default();
        stats.fault_stall_cycles += t.waiters.iter().map(|&(_, at)| t.done - at).sum::<u64>();
        t
    }
}

/// Splits sorted pages into maximal runs of consecutive pages.
pub fn contiguous_runs(pages: &[PageNum]) -> Vec<(PageNum, u64)> {
    let mut runs: Vec<(PageNum, u64)> = Vec::new();
    for &p in pages {
        match runs.last_mut() {
            Some((start, len)) if *start + *len == p => *len += 1,
            _ => runs.push((p, 1)),
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pager(mode: PagingMode) -> Pager<u32> {
        let mut p = Pager::new(mode, PageGeometry::default(), IoBusConfig::default());
        p.declare(Asid(0), 0, 2048);
        p
    }

    #[test]
    fn transfer_latency_arithmetic() {
        let bus = IoBusConfig::default();
        assert_eq!(bus.transfer_latency(4096), 20_256);
        assert_eq!(bus.transfer_latency(2 * 1024 * 1024), 151_072);
    }

    #[test]
    fn bus_serializes_fifo() {
        let mut bus = IoBusModel::new(IoBusConfig::default());
        let a = bus.submit(0, 4096);
        let b = bus.submit(10, 4096);
        let c = bus.submit(100_000, 4096);
        assert_eq!((a, b, c), (20_256, 40_512, 120_256));
    }

    #[test]
    fn concurrent_faults_share_one_transfer() {
        let mut p = pager(PagingMode::DemandBase);
        let first = p.fault(Asid(0), 7, 0, 1, |_| false).unwrap();
        let FaultOutcome::Started { id, done } = first else { panic!() };
        for w in 2..6 {
            assert_eq!(p.fault(Asid(0), 7, w as u64, w, |_| false).unwrap(), FaultOutcome::Joined { id });
        }
        assert_eq!(p.bus().transfers(), 1);
        let t = p.complete(id);
        assert_eq!(t.pages, vec![7]);
        assert_eq!(t.waiters.iter().map(|w| w.0).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        assert_eq!(done, 20_256);
        assert_eq!(p.stats(Asid(0)).faults, 5);
    }

    #[test]
    fn large_mode_moves_the_non_resident_rest_of_the_frame() {
        let mut p = pager(PagingMode::DemandLarge);
        let FaultOutcome::Started { id, done } = p.fault(Asid(0), 515, 0, 0, |v| v == 600).unwrap() else {
            panic!()
        };
        let t = p.complete(id);
        assert_eq!(t.pages.len(), 511);
        assert_eq!(done, IoBusConfig::default().transfer_latency(511 * 4096));
    }

    #[test]
    fn undeclared_fault_is_a_protection_error() {
        let mut p = pager(PagingMode::DemandBase);
        assert!(matches!(p.fault(Asid(0), 4096, 0, 0, |_| false), Err(Error::Protection { .. })));
        assert!(matches!(p.fault(Asid(1), 0, 0, 0, |_| false), Err(Error::Protection { .. })));
    }

    #[test]
    fn runs_split_on_gaps() {
        assert_eq!(contiguous_runs(&[1, 2, 3, 7, 8, 10]), vec![(1, 3), (7, 2), (10, 1)]);
    }
}
