//! Run metrics, CSV rendering and weighted speedup.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tlb::LevelStats;

fn rate(s: &LevelStats) -> f64 {
    // No lookups means nothing missed.
    s.hit_rate().unwrap_or(1.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AppMetrics {
    pub asid: u16,
    pub profile: String,
    pub cores: usize,
    pub warps: usize,
    pub retired: u64,
    pub finish_cycle: u64,
    pub ipc: f64,
    pub l1: LevelCounts,
    pub l2: LevelCounts,
    pub l1_steady: LevelCounts,
    pub l2_steady: LevelCounts,
    pub walks: u64,
    pub faults: u64,
    pub bytes_over_bus: u64,
    pub fault_stall_cycles: u64,
    pub prefault_bytes: u64,
    pub prefault_cycles: u64,
    pub peak_bloat: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LevelCounts {
    pub hits: u64,
    pub misses: u64,
}

impl From<LevelStats> for LevelCounts {
    fn from(s: LevelStats) -> Self {
        Self {
            hits: s.hits,
            misses: s.misses,
        }
    }
}

impl LevelCounts {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        rate(&LevelStats {
            hits: self.hits,
            misses: self.misses,
        })
    }

    pub fn add(&mut self, o: &LevelCounts) {
        self.hits += o.hits;
        self.misses += o.misses;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricSet {
    pub workload: String,
    pub mode: String,
    pub paging: String,
    pub seed: u64,
    pub cycles: u64,
    pub retired: u64,
    pub expected_accesses: u64,
    pub events: u64,
    pub apps: Vec<AppMetrics>,
    pub walks: u64,
    pub peak_active_walks: usize,
    pub walker_queued: u64,
    pub mshr_merges: u64,
    pub mshr_full_stalls: u64,
    pub transfers: u64,
    pub frames_checked: u64,
    pub frames_coalesced: u64,
    pub full_frames_after_alloc: u64,
    pub coalesced_frames_after_alloc: u64,
    pub splinters: u64,
    pub compactions: u64,
    pub migrated_pages: u64,
    pub freed_frames: u64,
    pub compaction_stall_cycles: u64,
    pub soft_guarantee_violations: u64,
    pub peak_mixed_frames: u64,
    pub translations_checked: u64,
    pub oracle_mismatches: u64,
    pub content_violations: u64,
    /// `(bytes, service cycles, count)` per distinct transfer shape.
    pub transfer_log: Vec<(u64, u64, u64)>,
    pub intervals: Vec<IntervalRow>,
}

/// One row of the per-interval CSV; `asid` is `None` for the total row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IntervalRow {
    pub cycle: u64,
    pub asid: Option<u16>,
    pub l1_hits: u64,
    pub l1_misses: u64,
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub walks: u64,
    pub retired: u64,
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "workload",
    "mode",
    "paging",
    "seed",
    "apps",
    "cycles",
    "retired",
    "ipc",
    "l1_hits",
    "l1_misses",
    "l2_hits",
    "l2_misses",
    "l1_hit_rate",
    "l2_hit_rate",
    "walks",
    "peak_active_walks",
    "walker_queued",
    "mshr_merges",
    "faults",
    "transfers",
    "bytes_over_bus",
    "fault_stall_cycles",
    "prefault_bytes",
    "prefault_cycles",
    "frames_checked",
    "frames_coalesced",
    "full_frames_after_alloc",
    "coalesced_frames_after_alloc",
    "splinters",
    "compactions",
    "migrated_pages",
    "freed_frames",
    "compaction_stall_cycles",
    "soft_guarantee_violations",
    "peak_mixed_frames",
    "peak_bloat",
    "oracle_mismatches",
    "content_violations",
    "app_ipc",
];

pub const INTERVAL_COLUMNS: &[&str] = &["cycle", "asid", "l1_hits", "l1_misses", "l2_hits", "l2_misses", "walks", "retired"];

impl MetricSet {
    pub fn ipc(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.retired as f64 / self.cycles as f64
        }
    }

    fn sum(&self, f: impl Fn(&AppMetrics) -> u64) -> u64 {
        self.apps.iter().map(f).sum()
    }

    fn levels(&self, f: impl Fn(&AppMetrics) -> LevelCounts) -> LevelCounts {
        let mut c = LevelCounts::default();
        for a in &self.apps {
            c.add(&f(a));
        }
        c
    }

    pub fn l1(&self) -> LevelCounts {
        self.levels(|a| a.l1)
    }

    pub fn l2(&self) -> LevelCounts {
        self.levels(|a| a.l2)
    }

    /// Steady-state L1 hit rate over all applications.
    pub fn l1_hit_rate(&self) -> f64 {
        self.levels(|a| a.l1_steady).hit_rate()
    }

    /// Steady-state L2 hit rate (hits over L2 lookups, i.e. L1 misses).
    pub fn l2_hit_rate(&self) -> f64 {
        self.levels(|a| a.l2_steady).hit_rate()
    }

    pub fn l2_miss_rate(&self) -> f64 {
        1.0 - self.l2_hit_rate()
    }

    pub fn faults(&self) -> u64 {
        self.sum(|a| a.faults)
    }

    pub fn bytes_over_bus(&self) -> u64 {
        self.sum(|a| a.bytes_over_bus)
    }

    pub fn peak_bloat(&self) -> f64 {
        self.apps.iter().map(|a| a.peak_bloat).fold(1.0, f64::max)
    }

    pub fn app_ipcs(&self) -> Vec<f64> {
        self.apps.iter().map(|a| a.ipc).collect()
    }

    pub fn csv_header() -> String {
        SUMMARY_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let l1 = self.l1();
        let l2 = self.l2();
        let ipcs: Vec<String> = self.apps.iter().map(|a| format!("{:.6}", a.ipc)).collect();
        let fields: Vec<String> = vec![
            self.workload.clone(),
            self.mode.clone(),
            self.paging.clone(),
            self.seed.to_string(),
            self.apps.len().to_string(),
            self.cycles.to_string(),
            self.retired.to_string(),
            format!("{:.6}", self.ipc()),
            l1.hits.to_string(),
            l1.misses.to_string(),
            l2.hits.to_string(),
            l2.misses.to_string(),
            format!("{:.6}", self.l1_hit_rate()),
            format!("{:.6}", self.l2_hit_rate()),
            self.walks.to_string(),
            self.peak_active_walks.to_string(),
            self.walker_queued.to_string(),
            self.mshr_merges.to_string(),
            self.faults().to_string(),
            self.transfers.to_string(),
            self.bytes_over_bus().to_string(),
            self.sum(|a| a.fault_stall_cycles).to_string(),
            self.sum(|a| a.prefault_bytes).to_string(),
            self.sum(|a| a.prefault_cycles).to_string(),
            self.frames_checked.to_string(),
            self.frames_coalesced.to_string(),
            self.full_frames_after_alloc.to_string(),
            self.coalesced_frames_after_alloc.to_string(),
            self.splinters.to_string(),
            self.compactions.to_string(),
            self.migrated_pages.to_string(),
            self.freed_frames.to_string(),
            self.compaction_stall_cycles.to_string(),
            self.soft_guarantee_violations.to_string(),
            self.peak_mixed_frames.to_string(),
            format!("{:.6}", self.peak_bloat()),
            self.oracle_mismatches.to_string(),
            self.content_violations.to_string(),
            ipcs.join(";"),
        ];
        debug_assert_eq!(fields.len(), SUMMARY_COLUMNS.len());
        fields.join(",")
    }

    pub fn summary_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }

    pub fn interval_csv(&self) -> String {
        let mut out = INTERVAL_COLUMNS.join(",");
        out.push('\n');
        for r in &self.intervals {
            let asid = r.asid.map(|a| a.to_string()).unwrap_or_else(|| "all".into());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.cycle, asid, r.l1_hits, r.l1_misses, r.l2_hits, r.l2_misses, r.walks, r.retired
            );
        }
        out
    }
}

/// Σ shared_i / alone_i.
pub fn weighted_speedup_from_ipcs(shared: &[f64], alone: &[f64]) -> Result<f64> {
    if shared.len() != alone.len() {
        return Err(Error::AloneCountMismatch {
            expected: shared.len(),
            got: alone.len(),
        });
    }
    shared
        .iter()
        .zip(alone)
        .enumerate()
        .map(|(i, (&s, &a))| if a > 0.0 { Ok(s / a) } else { Err(Error::ZeroAloneIpc { index: i }) })
        .sum()
}

/// Weighted speedup of a shared run given one standalone run per app.
pub fn weighted_speedup(shared: &MetricSet, alone: &[MetricSet]) -> Result<f64> {
    let alone_ipc: Vec<f64> = alone.iter().map(|m| m.apps.first().map_or(0.0, |a| a.ipc)).collect();
    weighted_speedup_from_ipcs(&shared.app_ipcs(), &alone_ipc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_ipcs_give_app_count() {
        assert_eq!(weighted_speedup_from_ipcs(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 3.0);
    }

    #[test]
    fn halved_ipcs_give_one() {
        assert_eq!(weighted_speedup_from_ipcs(&[0.5, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_alone_ipc_is_an_error() {
        assert_eq!(
            weighted_speedup_from_ipcs(&[0.5, 1.0], &[1.0, 0.0]),
            Err(Error::ZeroAloneIpc { index: 1 })
        );
        assert!(matches!(
            weighted_speedup_from_ipcs(&[0.5], &[1.0, 1.0]),
            Err(Error::AloneCountMismatch { .. })
        ));
    }

    #[test]
    fn summary_row_matches_header_width() {
        let m = MetricSet {
            apps: vec![AppMetrics::default(); 2],
            ..MetricSet::default()
        };
        let csv = m.summary_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }

    #[test]
    fn no_lookups_counts_as_no_misses() {
        assert_eq!(LevelCounts::default().hit_rate(), 1.0);
    }
}
