//! Run configuration, read from TOML.

use serde::{Deserialize, Serialize};

use crate::allocator::AllocPolicy;
use crate::coalescer::CoalescerConfig;
use crate::compaction::CompactionConfig;
use crate::engine::workload::WorkloadSpec;
use crate::error::{ConfigError, Result};
use crate::geometry::PageGeometry;
use crate::memory::MemoryConfig;
use crate::paging::{IoBusConfig, PagingMode};
use crate::tlb::TlbConfig;
use crate::walker::WalkerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    GpuMmu,
    #[default]
    Mosaic,
    /// Every translation hits the L1 TLB.
    Ideal,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::GpuMmu, Mode::Mosaic, Mode::Ideal];

    pub fn label(self) -> &'static str {
        match self {
            Mode::GpuMmu => "gpu_mmu",
            Mode::Mosaic => "mosaic",
            Mode::Ideal => "ideal",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Mode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| ConfigError::invalid("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreSplit {
    /// Cores divided evenly between applications.
    #[default]
    Static,
    /// Every core runs warps of every application.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub cores: usize,
    pub warps_per_core: usize,
    pub dram_latency: u64,
    pub dram_channels: usize,
    pub gpu_memory_bytes: u64,
    pub core_split: CoreSplit,
    /// TLB statistics of an app count only after it retired this share of
    /// its accesses.
    pub warmup_fraction: f64,
    pub interval_cycles: u64,
    /// Run the coalescer under the GPU-MMU allocator too (it finds nothing
    /// to coalesce when applications interleave).
    pub gpu_mmu_coalescing: bool,
    pub gpu_mmu_window: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            cores: 30,
            warps_per_core: 48,
            dram_latency: 100,
            dram_channels: 6,
            gpu_memory_bytes: 3 << 30,
            core_split: CoreSplit::Static,
            warmup_fraction: 0.25,
            interval_cycles: 100_000,
            gpu_mmu_coalescing: false,
            gpu_mmu_window: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub paging: PagingMode,
    /// Cross-check translations against the flat oracle and page contents
    /// against their tags.
    pub verify: bool,
    pub geometry: PageGeometry,
    pub tlb: TlbConfig,
    pub walker: WalkerConfig,
    pub bus: IoBusConfig,
    pub compaction: CompactionConfig,
    pub coalescer: CoalescerConfig,
    pub system: SystemConfig,
    pub workload: WorkloadSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            mode: Mode::Mosaic,
            paging: PagingMode::Prefault,
            verify: true,
            geometry: PageGeometry::default(),
            tlb: TlbConfig::default(),
            walker: WalkerConfig::default(),
            bus: IoBusConfig::default(),
            compaction: CompactionConfig::default(),
            coalescer: CoalescerConfig::default(),
            system: SystemConfig::default(),
            workload: WorkloadSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geometry.validate()?;
        self.tlb.validate()?;
        self.walker.validate()?;
        self.bus.validate()?;
        self.compaction.validate()?;
        self.workload.validate()?;
        let s = &self.system;
        let pos = |v: u64, f: &str| {
            if v == 0 {
                Err(ConfigError::invalid(format!("system.{f}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        pos(s.cores as u64, "cores")?;
        pos(s.warps_per_core as u64, "warps_per_core")?;
        pos(s.dram_channels as u64, "dram_channels")?;
        pos(s.interval_cycles, "interval_cycles")?;
        pos(s.gpu_mmu_window as u64, "gpu_mmu_window")?;
        if !(0.0..1.0).contains(&s.warmup_fraction) {
            return Err(ConfigError::invalid("system.warmup_fraction", "must lie in [0, 1)"));
        }
        if s.gpu_memory_bytes < self.geometry.large_page_bytes || s.gpu_memory_bytes % self.geometry.large_page_bytes != 0 {
            return Err(ConfigError::invalid(
                "system.gpu_memory_bytes",
                "must be a positive multiple of the large page size",
            ));
        }
        let apps = self.workload.apps.len();
        if s.core_split == CoreSplit::Static && apps > s.cores {
            return Err(ConfigError::invalid("system.cores", format!("{apps} applications need at least {apps} cores")));
        }
        let declared: u64 = self
            .workload
            .resolve(self.seed)?
            .iter()
            .map(|a| {
                a.profile
                    .buffers
                    .iter()
                    .map(|b| self.geometry.pages_for_bytes(b.bytes) * self.geometry.base_page_bytes)
                    .sum::<u64>()
            })
            .sum();
        if declared > s.gpu_memory_bytes {
            return Err(ConfigError::invalid(
                "workload",
                format!("declares {declared} bytes, more than the {} bytes of GPU memory", s.gpu_memory_bytes),
            ));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> u64 {
        self.system.gpu_memory_bytes / self.geometry.large_page_bytes
    }

    /// Memory-manager settings implied by the mode.
    pub fn memory_config(&self) -> MemoryConfig {
        let (policy, coalescing, compaction) = match self.mode {
            Mode::Mosaic => (AllocPolicy::Cocoa, true, Some(self.compaction)),
            Mode::GpuMmu | Mode::Ideal => (AllocPolicy::GpuMmu, self.system.gpu_mmu_coalescing, None),
        };
        MemoryConfig {
            geometry: self.geometry,
            total_frames: self.total_frames(),
            policy,
            coalescing,
            compaction,
            coalescer: self.coalescer,
            gpu_mmu_window: self.system.gpu_mmu_window,
            content_seed: self.seed,
        }
    }

    /// Cores given to each application.
    pub fn cores_per_app(&self) -> Vec<Vec<usize>> {
        let n = self.workload.apps.len();
        let cores = self.system.cores;
        match self.system.core_split {
            CoreSplit::Shared => vec![(0..cores).collect(); n],
            CoreSplit::Static => {
                let mut next = 0;
                (0..n)
                    .map(|i| {
                        let k = cores / n + usize::from(i < cores % n);
                        let r = (next..next + k).collect();
                        next += k;
                        r
                    })
                    .collect()
            }
        }
    }

    pub fn warps_per_core_per_app(&self) -> usize {
        match self.system.core_split {
            CoreSplit::Static => self.system.warps_per_core,
            CoreSplit::Shared => (self.system.warps_per_core / self.workload.apps.len()).max(1),
        }
    }

    /// Configuration of application `index` running by itself on the cores
    /// it had in this run, under the GPU-MMU baseline.
    pub fn alone_config(&self, index: usize) -> Result<RunConfig, ConfigError> {
        let apps = self.workload.resolve(self.seed)?;
        let app = apps
            .get(index)
            .ok_or_else(|| ConfigError::invalid("workload.apps", format!("no application {index}")))?;
        let mut cfg = self.clone();
        cfg.mode = Mode::GpuMmu;
        cfg.system.cores = self.cores_per_app()[index].len();
        cfg.system.warps_per_core = self.warps_per_core_per_app();
        cfg.system.core_split = CoreSplit::Static;
        cfg.workload.name = format!("{}-alone{index}", self.workload.name);
        cfg.workload.apps = vec![crate::engine::workload::AppEntry {
            profile: self.workload.apps[index].profile.clone(),
            trace_seed: Some(app.trace_seed),
        }];
        Ok(cfg)
    }
}
