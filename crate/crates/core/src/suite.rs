//! Workload sweeps: shared runs per mode, standalone baselines, weighted
//! speedups and per-app-count aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, weighted_speedup_from_ipcs, MetricSet, Mode, RunConfig, WorkloadSpec};
use crate::error::{ConfigError, Error, Result};
use crate::paging::PagingMode;

/// L2 hit rate under GPU-MMU below which a workload counts as TLB-bound.
pub const TLB_PRESSURE_L2_HIT_RATE: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// GPU-MMU under the suite's own paging mode.
    #[default]
    GpuMmu,
    /// GPU-MMU with everything transferred up front.
    GpuMmuPrefault,
}

impl std::str::FromStr for Baseline {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "gpu_mmu" => Ok(Baseline::GpuMmu),
            "gpu_mmu_prefault" => Ok(Baseline::GpuMmuPrefault),
            _ => Err(ConfigError::invalid("baseline", format!("unknown baseline `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogeneousSweep {
    pub profile: String,
    pub min_apps: usize,
    pub max_apps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneousSweep {
    pub min_apps: usize,
    pub max_apps: usize,
    /// Workloads drawn per app count.
    #[serde(default = "one")]
    pub per_count: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: String,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub baseline: Baseline,
    /// Template for every run; its workload is replaced.
    pub base: RunConfig,
    pub workloads: Vec<WorkloadSpec>,
    pub homogeneous: Vec<HomogeneousSweep>,
    pub heterogeneous: Vec<HeterogeneousSweep>,
    /// Applied to every generated workload.
    pub access_scale: f64,
    /// Where the CLI writes `runs.csv` and `aggregate.csv`.
    pub output_dir: Option<std::path::PathBuf>,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            name: "suite".into(),
            modes: Mode::ALL.to_vec(),
            seeds: vec![1],
            baseline: Baseline::GpuMmu,
            base: RunConfig::default(),
            workloads: Vec::new(),
            homogeneous: Vec::new(),
            heterogeneous: Vec::new(),
            access_scale: 1.0,
            output_dir: None,
        }
    }
}

impl SuiteSpec {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let s: SuiteSpec = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.modes.is_empty() {
            return Err(ConfigError::invalid("modes", "at least one mode required"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::invalid("seeds", "at least one seed required"));
        }
        let w = self.expand()?;
        if w.is_empty() {
            return Err(ConfigError::invalid("workloads", "suite has no workloads"));
        }
        let mut names: Vec<&str> = w.iter().map(|w| w.name.as_str()).collect();
        names.sort_unstable();
        if let Some(d) = names.windows(2).find(|p| p[0] == p[1]) {
            return Err(ConfigError::invalid("workloads", format!("duplicate workload `{}`", d[0])));
        }
        Ok(())
    }

    /// Every workload of the suite, explicit ones first.
    pub fn expand(&self) -> Result<Vec<WorkloadSpec>, ConfigError> {
        let mut out = self.workloads.clone();
        for h in &self.homogeneous {
            if h.min_apps == 0 || h.min_apps > h.max_apps {
                return Err(ConfigError::invalid("homogeneous", "need 1 <= min_apps <= max_apps"));
            }
            for n in h.min_apps..=h.max_apps {
                out.push(WorkloadSpec::homogeneous(&h.profile, n));
            }
        }
        for h in &self.heterogeneous {
            if h.min_apps < 2 || h.min_apps > h.max_apps {
                return Err(ConfigError::invalid("heterogeneous", "need 2 <= min_apps <= max_apps"));
            }
            for n in h.min_apps..=h.max_apps {
                for i in 0..h.per_count {
                    let mut w = WorkloadSpec::heterogeneous(n, crate::engine::workload::mix(&[h.seed, n as u64, i as u64]))?;
                    w.name = format!("{}#{i}", w.name);
                    out.push(w);
                }
            }
        }
        for w in &mut out {
            w.access_scale *= self.access_scale;
        }
        Ok(out)
    }

    fn modes(&self) -> Vec<Mode> {
        let mut m = self.modes.clone();
        m.sort();
        m.dedup();
        m
    }

    fn seeds(&self) -> Vec<u64> {
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Job {
    Shared { w: usize, seed: u64, mode: Mode, paging: PagingMode },
    Alone { w: usize, seed: u64, app: usize, paging: PagingMode },
}

/// One shared run of the suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub workload: String,
    pub apps: usize,
    pub mode: Mode,
    pub seed: u64,
    pub status: String,
    pub weighted_speedup: Option<f64>,
    /// Weighted speedup over the baseline's.
    pub norm_ws: Option<f64>,
    pub ws_over_ideal: Option<f64>,
    pub l1_hit_rate: Option<f64>,
    pub l2_hit_rate: Option<f64>,
    pub tlb_pressure: Option<bool>,
    #[serde(skip)]
    pub metrics: Option<MetricSet>,
}

impl RunRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const RUN_COLUMNS: &[&str] = &[
    "workload",
    "apps",
    "mode",
    "seed",
    "status",
    "weighted_speedup",
    "norm_ws",
    "ws_over_ideal",
    "l1_hit_rate",
    "l2_hit_rate",
    "tlb_pressure",
];

/// Means over the shared runs with a given application count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggRow {
    pub apps: usize,
    pub runs: usize,
    pub failed: usize,
    /// Per mode: (mean norm_ws, mean ws_over_ideal, mean l1 hit, mean l2 hit)
    pub per_mode: BTreeMap<Mode, ModeAgg>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ModeAgg {
    pub norm_ws: Option<f64>,
    pub ws_over_ideal: Option<f64>,
    pub l1_hit_rate: Option<f64>,
    pub l2_hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<AggRow>,
}

fn run_job(spec: &SuiteSpec, workloads: &[WorkloadSpec], job: Job) -> Result<MetricSet> {
    let shared_cfg = |w: usize, seed: u64, mode: Mode, paging: PagingMode| {
        let mut c = spec.base.clone();
        c.workload = workloads[w].clone();
        c.seed = seed;
        c.mode = mode;
        c.paging = paging;
        c
    };
    match job {
        Job::Shared { w, seed, mode, paging } => engine::run(&shared_cfg(w, seed, mode, paging)),
        Job::Alone { w, seed, app, paging } => engine::run(&shared_cfg(w, seed, Mode::GpuMmu, paging).alone_config(app)?),
    }
}

/// Runs every (workload, mode, seed) with up to `jobs` runs in parallel.
pub fn run_suite(spec: &SuiteSpec, jobs: usize) -> Result<SuiteResult> {
    spec.validate()?;
    let workloads = spec.expand()?;
    let modes = spec.modes();
    let seeds = spec.seeds();
    let paging = spec.base.paging;
    let base_paging = match spec.baseline {
        Baseline::GpuMmu => paging,
        Baseline::GpuMmuPrefault => PagingMode::Prefault,
    };
    let mut list = Vec::new();
    for (w, wl) in workloads.iter().enumerate() {
        for &seed in &seeds {
            for &mode in &modes {
                list.push(Job::Shared { w, seed, mode, paging });
            }
            list.push(Job::Shared { w, seed, mode: Mode::GpuMmu, paging: base_paging });
            for app in 0..wl.apps.len() {
                list.push(Job::Alone { w, seed, app, paging });
                list.push(Job::Alone { w, seed, app, paging: base_paging });
            }
        }
    }
    list.sort();
    list.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let results: BTreeMap<Job, Result<MetricSet>> = pool.install(|| {
        list.par_iter()
            .map(|&j| (j, run_job(spec, &workloads, j)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    });

    let ws = |w: usize, seed: u64, mode: Mode, paging: PagingMode| -> Option<f64> {
        let shared = results.get(&Job::Shared { w, seed, mode, paging })?.as_ref().ok()?;
        let alone: Option<Vec<f64>> = (0..workloads[w].apps.len())
            .map(|app| {
                results
                    .get(&Job::Alone { w, seed, app, paging })?
                    .as_ref()
                    .ok()
                    .and_then(|m| m.apps.first().map(|a| a.ipc))
            })
            .collect();
        weighted_speedup_from_ipcs(&shared.app_ipcs(), &alone?).ok()
    };

    let mut rows = Vec::new();
    for (w, wl) in workloads.iter().enumerate() {
        for &seed in &seeds {
            let base_ws = ws(w, seed, Mode::GpuMmu, base_paging);
            let ideal_ws = ws(w, seed, Mode::Ideal, paging);
            let pressure = results
                .get(&Job::Shared { w, seed, mode: Mode::GpuMmu, paging: base_paging })
                .and_then(|r| r.as_ref().ok())
                .map(|m| m.l2_hit_rate() < TLB_PRESSURE_L2_HIT_RATE);
            for &mode in &modes {
                let r = &results[&Job::Shared { w, seed, mode, paging }];
                let mine = ws(w, seed, mode, paging);
                let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
                    (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                    _ => None,
                };
                rows.push(RunRow {
                    workload: wl.name.clone(),
                    apps: wl.apps.len(),
                    mode,
                    seed,
                    status: match r {
                        Ok(_) => "ok".into(),
                        Err(e) => format!("error: {e}").replace(',', ";"),
                    },
                    weighted_speedup: mine,
                    norm_ws: ratio(mine, base_ws),
                    ws_over_ideal: ratio(mine, ideal_ws),
                    l1_hit_rate: r.as_ref().ok().map(MetricSet::l1_hit_rate),
                    l2_hit_rate: r.as_ref().ok().map(MetricSet::l2_hit_rate),
                    tlb_pressure: pressure,
                    metrics: r.as_ref().ok().cloned(),
                });
            }
        }
    }
    let aggregates = aggregate(&rows);
    Ok(SuiteResult { rows, aggregates })
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-app-count aggregation; a pure function of the run rows.
pub fn aggregate(rows: &[RunRow]) -> Vec<AggRow> {
    let mut buckets: BTreeMap<usize, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        buckets.entry(r.apps).or_default().push(r);
    }
    buckets
        .into_iter()
        .map(|(apps, rs)| {
            let mut modes: Vec<Mode> = rs.iter().map(|r| r.mode).collect();
            modes.sort();
            modes.dedup();
            let per_mode = modes
                .into_iter()
                .map(|m| {
                    let of = || rs.iter().filter(move |r| r.mode == m && r.ok());
                    (
                        m,
                        ModeAgg {
                            norm_ws: mean(of().map(|r| r.norm_ws)),
                            ws_over_ideal: mean(of().map(|r| r.ws_over_ideal)),
                            l1_hit_rate: mean(of().map(|r| r.l1_hit_rate)),
                            l2_hit_rate: mean(of().map(|r| r.l2_hit_rate)),
                        },
                    )
                })
                .collect();
            AggRow {
                apps,
                runs: rs.len(),
                failed: rs.iter().filter(|r| !r.ok()).count(),
                per_mode,
            }
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

// Shortest round-trip form, so aggregates recompute exactly.
fn exact(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-run CSV: suite columns followed by the run's summary columns.
pub fn runs_csv(rows: &[RunRow]) -> String {
    let mut out = format!("{},{}\n", RUN_COLUMNS.join(","), MetricSet::csv_header());
    let blanks = ",".repeat(engine::metrics::SUMMARY_COLUMNS.len() - 1);
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.workload,
            r.apps,
            r.mode.label(),
            r.seed,
            r.status,
            exact(r.weighted_speedup),
            exact(r.norm_ws),
            exact(r.ws_over_ideal),
            exact(r.l1_hit_rate),
            exact(r.l2_hit_rate),
            r.tlb_pressure.map(|b| b.to_string()).unwrap_or_default(),
            r.metrics.as_ref().map(MetricSet::csv_row).unwrap_or_else(|| blanks.clone()),
        );
    }
    out
}

/// Reads back the suite columns of a per-run CSV.
pub fn parse_runs_csv(text: &str) -> Result<Vec<RunRow>, ConfigError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    if header.len() < RUN_COLUMNS.len() || header[..RUN_COLUMNS.len()] != *RUN_COLUMNS {
        return Err(ConfigError::Parse("not a per-run suite CSV".into()));
    }
    let bad = |i: usize, what: &str| ConfigError::Parse(format!("line {}: bad {what}", i + 2));
    let num = |s: &str| -> Option<f64> { s.parse().ok() };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() < RUN_COLUMNS.len() {
                return Err(bad(i, "row width"));
            }
            Ok(RunRow {
                workload: f[0].into(),
                apps: f[1].parse().map_err(|_| bad(i, "apps"))?,
                mode: f[2].parse().map_err(|_| bad(i, "mode"))?,
                seed: f[3].parse().map_err(|_| bad(i, "seed"))?,
                status: f[4].into(),
                weighted_speedup: num(f[5]),
                norm_ws: num(f[6]),
                ws_over_ideal: num(f[7]),
                l1_hit_rate: num(f[8]),
                l2_hit_rate: num(f[9]),
                tlb_pressure: f[10].parse().ok(),
                metrics: None,
            })
        })
        .collect()
}

/// Aggregate CSV, one row per app count, fixed per-mode column groups.
pub fn aggregate_csv(rows: &[AggRow]) -> String {
    let mut out = String::from("apps,runs,failed");
    for m in Mode::ALL {
        let l = m.label();
        let _ = write!(out, ",norm_ws_{l},ws_over_ideal_{l},l1_hit_{l},l2_hit_{l}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.apps, r.runs, r.failed);
        for m in Mode::ALL {
            let a = r.per_mode.get(&m).copied().unwrap_or_default();
            let _ = write!(
                out,
                ",{},{},{},{}",
                opt(a.norm_ws),
                opt(a.ws_over_ideal),
                opt(a.l1_hit_rate),
                opt(a.l2_hit_rate)
            );
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SuiteSpec {
        let mut s = SuiteSpec::default();
        s.base.system.cores = 4;
        s.base.system.warps_per_core = 4;
        s.base.system.gpu_memory_bytes = 512 << 20;
        s.access_scale = 0.02;
        s
    }

    #[test]
    fn one_workload_three_modes() {
        let mut s = tiny();
        s.workloads = vec![WorkloadSpec::homogeneous("stream", 2)];
        let r = run_suite(&s, 2).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.aggregates.len(), 1);
        assert!(r.rows.iter().all(RunRow::ok));
        let gpu = r.rows.iter().find(|r| r.mode == Mode::GpuMmu).unwrap();
        assert!((gpu.norm_ws.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_sweep_has_one_bucket_per_count() {
        let mut s = tiny();
        s.modes = vec![Mode::Mosaic];
        s.homogeneous = vec![HomogeneousSweep {
            profile: "histogram".into(),
            min_apps: 1,
            max_apps: 4,
        }];
        let r = run_suite(&s, 4).unwrap();
        assert_eq!(r.aggregates.iter().map(|a| a.apps).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn aggregate_is_recomputable_from_csv() {
        let mut s = tiny();
        s.heterogeneous = vec![HeterogeneousSweep {
            min_apps: 2,
            max_apps: 3,
            per_count: 2,
            seed: 4,
        }];
        let r = run_suite(&s, 4).unwrap();
        let parsed = parse_runs_csv(&runs_csv(&r.rows)).unwrap();
        let again = aggregate(&parsed);
        assert_eq!(aggregate_csv(&again), aggregate_csv(&r.aggregates));
    }

    #[test]
    fn failed_runs_are_recorded_and_the_suite_continues() {
        let mut s = tiny();
        s.modes = vec![Mode::Mosaic];
        // 40 frames cannot hold 2 × 64MB; validation catches it per run.
        s.base.system.gpu_memory_bytes = 80 << 20;
        s.workloads = vec![WorkloadSpec::homogeneous("stream", 1), WorkloadSpec::homogeneous("uniform_64m", 2)];
        let r = run_suite(&s, 2).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows[0].ok());
        assert!(r.rows[1].status.starts_with("error"));
        assert_eq!(r.aggregates.iter().map(|a| a.failed).sum::<usize>(), 1);
    }

    #[test]
    fn duplicate_workloads_are_rejected() {
        let mut s = tiny();
        s.workloads = vec![WorkloadSpec::homogeneous("stream", 1), WorkloadSpec::homogeneous("stream", 1)];
        assert!(s.validate().is_err());
    }
}
