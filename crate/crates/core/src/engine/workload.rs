//! Application profiles, workload composition and access-stream generation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Result};
use crate::geometry::{Asid, PageGeometry, PageNum};

const MB: u64 = 1 << 20;

/// Line size used to spread accesses across DRAM channels.
pub const LINE_BYTES: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    Sequential,
    Strided { stride_pages: u64 },
    Uniform,
    /// `access_fraction` of accesses land on a fixed random `page_fraction`
    /// of the pages.
    Hotset { access_fraction: f64, page_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSpec {
    pub bytes: u64,
    /// Allocated at the launch of this kernel.
    #[serde(default)]
    pub alloc_kernel: u32,
    /// Freed when this kernel ends; `None` keeps it until the app exits.
    #[serde(default)]
    pub free_after_kernel: Option<u32>,
    /// Share of the buffer's pages the kernels actually touch, spread evenly.
    #[serde(default = "one")]
    pub touch_fraction: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub accesses: u64,
    /// Indices into the profile's buffer list.
    pub buffers: Vec<usize>,
    pub pattern: Pattern,
    /// Inclusive range of compute cycles between a warp's accesses.
    pub compute_delay: [u64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppProfile {
    pub name: String,
    pub buffers: Vec<BufferSpec>,
    pub kernels: Vec<KernelSpec>,
}

impl AppProfile {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |f: &str| format!("profile.{}.{f}", self.name);
        if self.buffers.is_empty() {
            return Err(ConfigError::invalid(field("buffers"), "at least one buffer required"));
        }
        if self.kernels.is_empty() {
            return Err(ConfigError::invalid(field("kernels"), "at least one kernel required"));
        }
        for (i, b) in self.buffers.iter().enumerate() {
            if b.bytes == 0 {
                return Err(ConfigError::invalid(field(&format!("buffers[{i}].bytes")), "must be positive"));
            }
            if !(b.touch_fraction > 0.0 && b.touch_fraction <= 1.0) {
                return Err(ConfigError::invalid(field(&format!("buffers[{i}].touch_fraction")), "must lie in (0, 1]"));
            }
            if let Some(f) = b.free_after_kernel {
                if f < b.alloc_kernel {
                    return Err(ConfigError::invalid(field(&format!("buffers[{i}].free_after_kernel")), "precedes alloc_kernel"));
                }
            }
        }
        for (k, kern) in self.kernels.iter().enumerate() {
            let kf = |f: &str| field(&format!("kernels[{k}].{f}"));
            if kern.buffers.is_empty() {
                return Err(ConfigError::invalid(kf("buffers"), "must name at least one buffer"));
            }
            for &b in &kern.buffers {
                let Some(buf) = self.buffers.get(b) else {
                    return Err(ConfigError::invalid(kf("buffers"), format!("no buffer {b}")));
                };
                let live = buf.alloc_kernel as usize <= k && buf.free_after_kernel.is_none_or(|f| k <= f as usize);
                if !live {
                    return Err(ConfigError::invalid(kf("buffers"), format!("buffer {b} is not live in kernel {k}")));
                }
            }
            if kern.compute_delay[0] > kern.compute_delay[1] {
                return Err(ConfigError::invalid(kf("compute_delay"), "min exceeds max"));
            }
            match kern.pattern {
                Pattern::Strided { stride_pages: 0 } => {
                    return Err(ConfigError::invalid(kf("pattern.stride_pages"), "must be positive"));
                }
                Pattern::Hotset { access_fraction, page_fraction } => {
                    if !(0.0..=1.0).contains(&access_fraction) {
                        return Err(ConfigError::invalid(kf("pattern.access_fraction"), "must lie in [0, 1]"));
                    }
                    if !(page_fraction > 0.0 && page_fraction < 1.0) {
                        return Err(ConfigError::invalid(kf("pattern.page_fraction"), "must lie in (0, 1)"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn total_accesses(&self) -> u64 {
        self.kernels.iter().map(|k| k.accesses).sum()
    }

    pub fn declared_bytes(&self) -> u64 {
        self.buffers.iter().map(|b| b.bytes).sum()
    }

    fn scaled(mut self, scale: f64) -> Self {
        for k in &mut self.kernels {
            k.accesses = ((k.accesses as f64 * scale).ceil() as u64).max(1);
        }
        self
    }
}

fn buf(mb: f64) -> BufferSpec {
    BufferSpec {
        bytes: (mb * MB as f64) as u64,
        alloc_kernel: 0,
        free_after_kernel: None,
        touch_fraction: 1.0,
    }
}

fn kern(accesses: u64, buffers: &[usize], pattern: Pattern, delay: [u64; 2]) -> KernelSpec {
    KernelSpec {
        accesses,
        buffers: buffers.to_vec(),
        pattern,
        compute_delay: delay,
    }
}

/// The built-in profile library.
pub fn profile_library() -> Vec<AppProfile> {
    let hot = |a, p| Pattern::Hotset {
        access_fraction: a,
        page_fraction: p,
    };
    vec![
        AppProfile {
            name: "tlb_pressure".into(),
            buffers: vec![buf(64.0)],
            kernels: vec![kern(200_000, &[0], hot(0.9, 1.0 / 64.0), [150, 250])],
        },
        AppProfile {
            name: "uniform_64m".into(),
            buffers: vec![buf(64.0)],
            kernels: vec![kern(200_000, &[0], Pattern::Uniform, [150, 250])],
        },
        AppProfile {
            name: "stream".into(),
            buffers: vec![buf(16.0), buf(16.0)],
            kernels: vec![kern(150_000, &[0, 1], Pattern::Sequential, [100, 200])],
        },
        AppProfile {
            name: "stencil".into(),
            buffers: vec![
                buf(24.0),
                BufferSpec {
                    free_after_kernel: Some(0),
                    ..buf(7.0)
                },
                BufferSpec {
                    alloc_kernel: 1,
                    free_after_kernel: Some(1),
                    ..buf(7.0)
                },
            ],
            kernels: vec![
                kern(80_000, &[0, 1], Pattern::Strided { stride_pages: 3 }, [120, 220]),
                kern(80_000, &[0, 2], Pattern::Strided { stride_pages: 3 }, [120, 220]),
            ],
        },
        AppProfile {
            name: "graph".into(),
            buffers: vec![
                buf(40.0),
                BufferSpec {
                    free_after_kernel: Some(0),
                    ..buf(3.0)
                },
                buf(1.0),
            ],
            kernels: vec![
                kern(100_000, &[0, 1, 2], Pattern::Uniform, [150, 250]),
                kern(100_000, &[0, 2], hot(0.8, 0.05), [150, 250]),
            ],
        },
        AppProfile {
            name: "histogram".into(),
            buffers: vec![
                buf(8.0),
                BufferSpec {
                    free_after_kernel: Some(0),
                    ..buf(1.5)
                },
                buf(0.5),
            ],
            kernels: vec![
                kern(100_000, &[0, 1, 2], hot(0.95, 0.02), [100, 200]),
                kern(50_000, &[0, 2], Pattern::Sequential, [100, 200]),
            ],
        },
        AppProfile {
            name: "sparse".into(),
            buffers: vec![BufferSpec {
                touch_fraction: 0.3,
                ..buf(48.0)
            }],
            kernels: vec![kern(120_000, &[0], Pattern::Uniform, [150, 250])],
        },
        AppProfile {
            name: "reduce".into(),
            buffers: vec![
                buf(32.0),
                BufferSpec {
                    free_after_kernel: Some(0),
                    ..buf(6.0)
                },
            ],
            kernels: vec![
                kern(100_000, &[0, 1], Pattern::Sequential, [100, 200]),
                kern(60_000, &[0], Pattern::Strided { stride_pages: 8 }, [100, 200]),
            ],
        },
    ]
}

pub fn lookup_profile(name: &str, custom: &[AppProfile]) -> Result<AppProfile, ConfigError> {
    custom
        .iter()
        .chain(profile_library().iter())
        .find(|p| p.name == name)
        .cloned()
        .ok_or_else(|| ConfigError::UnknownProfile(name.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppEntry {
    pub profile: String,
    /// Fixes the app's trace independently of its position and master seed.
    #[serde(default)]
    pub trace_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    pub apps: Vec<AppEntry>,
    /// Profiles defined inline; they shadow library profiles of the same name.
    pub profiles: Vec<AppProfile>,
    /// Multiplies every kernel's access count.
    pub access_scale: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            apps: vec![AppEntry {
                profile: "tlb_pressure".into(),
                trace_seed: None,
            }],
            profiles: Vec::new(),
            access_scale: 1.0,
        }
    }
}

impl WorkloadSpec {
    /// `n` copies of one profile.
    pub fn homogeneous(profile: &str, n: usize) -> Self {
        Self {
            name: format!("{profile}x{n}"),
            apps: (0..n)
                .map(|_| AppEntry {
                    profile: profile.into(),
                    trace_seed: None,
                })
                .collect(),
            ..Self::default()
        }
    }

    /// `n` distinct library profiles drawn without replacement.
    pub fn heterogeneous(n: usize, seed: u64) -> Result<Self, ConfigError> {
        let mut names: Vec<String> = profile_library().into_iter().map(|p| p.name).collect();
        if n > names.len() {
            return Err(ConfigError::invalid("workload.apps", format!("only {} distinct profiles exist", names.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        names.shuffle(&mut rng);
        names.truncate(n);
        Ok(Self {
            name: format!("mix{n}-{}", names.join("+")),
            apps: names
                .into_iter()
                .map(|profile| AppEntry {
                    profile,
                    trace_seed: None,
                })
                .collect(),
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.apps.is_empty() {
            return Err(ConfigError::invalid("workload.apps", "at least one application required"));
        }
        if self.apps.len() > 64 {
            return Err(ConfigError::invalid("workload.apps", "at most 64 applications"));
        }
        if !(self.access_scale > 0.0 && self.access_scale.is_finite()) {
            return Err(ConfigError::invalid("workload.access_scale", "must be positive"));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        for a in &self.apps {
            lookup_profile(&a.profile, &self.profiles)?.validate()?;
        }
        Ok(())
    }

    /// Resolves profiles, asids and per-app trace seeds.
    pub fn resolve(&self, master_seed: u64) -> Result<Vec<ResolvedApp>, ConfigError> {
        self.apps
            .iter()
            .enumerate()
            .map(|(i, a)| {
                Ok(ResolvedApp {
                    asid: Asid(i as u16),
                    profile: lookup_profile(&a.profile, &self.profiles)?.scaled(self.access_scale),
                    trace_seed: a.trace_seed.unwrap_or_else(|| mix(&[master_seed, i as u64, 0x5EED])),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedApp {
    pub asid: Asid,
    pub profile: AppProfile,
    pub trace_seed: u64,
}

/// Counter-based seed derivation (splitmix64 over the words).
pub fn mix(words: &[u64]) -> u64 {
    let mut z: u64 = 0x243F_6A88_85A3_08D3;
    for &w in words {
        z = z.wrapping_add(w).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Virtual placement of a buffer: buffers of at least one large page start
/// on a large-frame boundary, smaller ones are packed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferLayout {
    pub first_page: PageNum,
    pub pages: u64,
    pub touched: u64,
}

pub fn layout_buffers(profile: &AppProfile, g: &PageGeometry) -> Vec<BufferLayout> {
    let slots = g.slots_per_large_frame();
    let mut cursor: PageNum = 0;
    profile
        .buffers
        .iter()
        .map(|b| {
            let pages = g.pages_for_bytes(b.bytes);
            if b.bytes >= g.large_page_bytes {
                cursor = cursor.div_ceil(slots) * slots;
            }
            let l = BufferLayout {
                first_page: cursor,
                pages,
                touched: ((pages as f64 * b.touch_fraction).ceil() as u64).clamp(1, pages),
            };
            cursor += pages;
            l
        })
        .collect()
}

/// Pages `[0, logical_pages)` of a kernel's address space mapped onto the
/// touched pages of its buffers.
#[derive(Debug, Clone)]
pub struct KernelSpace {
    /// (logical start, buffer layout)
    segments: Vec<(u64, BufferLayout)>,
    logical_pages: u64,
    pattern: Pattern,
    hot: Vec<u64>,
    is_hot: Vec<bool>,
    delay: [u64; 2],
    lines_per_page: u64,
}

impl KernelSpace {
    pub fn new(kernel: &KernelSpec, layouts: &[BufferLayout], g: &PageGeometry, seed: u64) -> Self {
        let mut segments = Vec::new();
        let mut logical = 0;
        for &b in &kernel.buffers {
            segments.push((logical, layouts[b]));
            logical += layouts[b].touched;
        }
        let (hot, is_hot) = match kernel.pattern {
            Pattern::Hotset { page_fraction, .. } => {
                let n = ((logical as f64 * page_fraction).round() as u64).clamp(1, logical.saturating_sub(1).max(1));
                let mut all: Vec<u64> = (0..logical).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (chosen, _) = all.partial_shuffle(&mut rng, n as usize);
                let hot = chosen.to_vec();
                let mut is_hot = vec![false; logical as usize];
                for &h in &hot {
                    is_hot[h as usize] = true;
                }
                (hot, is_hot)
            }
            _ => (Vec::new(), Vec::new()),
        };
        Self {
            segments,
            logical_pages: logical,
            pattern: kernel.pattern,
            hot,
            is_hot,
            delay: kernel.compute_delay,
            lines_per_page: (g.base_page_bytes / LINE_BYTES).max(1),
        }
    }

    pub fn logical_pages(&self) -> u64 {
        self.logical_pages
    }

    pub fn hot_pages(&self) -> &[u64] {
        &self.hot
    }

    pub fn is_hot_logical(&self, l: u64) -> bool {
        self.is_hot.get(l as usize).copied().unwrap_or(false)
    }

    /// Virtual page backing logical page `l`.
    pub fn vpage(&self, l: u64) -> PageNum {
        let i = self.segments.partition_point(|&(start, _)| start <= l) - 1;
        let (start, b) = self.segments[i];
        let idx = l - start;
        b.first_page + idx * b.pages / b.touched
    }

    /// Initial per-warp cursor (in lines) so warps sweep disjoint regions.
    pub fn start_cursor(&self, warp: usize, warps: usize) -> u64 {
        let lines = self.logical_pages * self.lines_per_page;
        (lines as u128 * warp as u128 / warps.max(1) as u128) as u64
    }

    /// Next `(logical page, line)` for a warp.
    pub fn next(&self, rng: &mut ChaCha8Rng, cursor: &mut u64) -> (u64, u64) {
        let lpp = self.lines_per_page;
        match self.pattern {
            Pattern::Sequential => {
                let total = self.logical_pages * lpp;
                let c = *cursor % total;
                *cursor = c + 1;
                (c / lpp, c % lpp)
            }
            Pattern::Strided { stride_pages } => {
                let total = self.logical_pages * lpp;
                let c = *cursor % total;
                let mut n = c + stride_pages * lpp;
                if n >= total {
                    // shift by a page each sweep so every page gets visited
                    n = (n + lpp) % total;
                }
                *cursor = n;
                (c / lpp, c % lpp)
            }
            Pattern::Uniform => (rng.gen_range(0..self.logical_pages), rng.gen_range(0..lpp)),
            Pattern::Hotset { access_fraction, .. } => {
                let page = if rng.gen_bool(access_fraction) {
                    self.hot[rng.gen_range(0..self.hot.len())]
                } else {
                    loop {
                        let p = rng.gen_range(0..self.logical_pages);
                        if !self.is_hot[p as usize] {
                            break p;
                        }
                    }
                };
                (page, rng.gen_range(0..lpp))
            }
        }
    }

    pub fn delay(&self, rng: &mut ChaCha8Rng) -> u64 {
        rng.gen_range(self.delay[0]..=self.delay[1])
    }
}

/// Seed of warp `warp` of an app for kernel `kernel`.
pub fn warp_seed(trace_seed: u64, kernel: usize, warp: usize) -> u64 {
    mix(&[trace_seed, kernel as u64, warp as u64])
}

/// Splits `accesses` across `warps` (earlier warps take the remainder).
pub fn split_accesses(accesses: u64, warps: usize) -> Vec<u64> {
    let w = warps as u64;
    (0..w).map(|i| accesses / w + u64::from(i < accesses % w)).collect()
}

/// Materialized access streams (virtual pages) of every warp of every
/// kernel of one app.
pub fn generate_traces(app: &ResolvedApp, g: &PageGeometry, warps: usize) -> Vec<Vec<Vec<PageNum>>> {
    let layouts = layout_buffers(&app.profile, g);
    app.profile
        .kernels
        .iter()
        .enumerate()
        .map(|(k, kernel)| {
            let space = KernelSpace::new(kernel, &layouts, g, kernel_space_seed(app.trace_seed, k));
            split_accesses(kernel.accesses, warps)
                .into_iter()
                .enumerate()
                .map(|(w, n)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(warp_seed(app.trace_seed, k, w));
                    let mut cursor = space.start_cursor(w, warps);
                    (0..n)
                        .map(|_| {
                            let (l, _) = space.next(&mut rng, &mut cursor);
                            let _ = space.delay(&mut rng);
                            space.vpage(l)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// The hot-set seed a kernel's address space uses.
pub fn kernel_space_seed(trace_seed: u64, kernel: usize) -> u64 {
    mix(&[trace_seed, kernel as u64, 0x407])
}
