//! Discrete-event simulation of warps issuing translated memory accesses
//! against the TLBs, the shared walker, DRAM and the demand-paging bus.

pub mod config;
pub mod event;
pub mod metrics;
pub mod workload;

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{CoreSplit, Mode, RunConfig, SystemConfig};
pub use metrics::{weighted_speedup, weighted_speedup_from_ipcs, AppMetrics, IntervalRow, LevelCounts, MetricSet};
pub use workload::{AppProfile, Pattern, WorkloadSpec};

use crate::error::{Error, Result};
use crate::geometry::{Asid, PageGeometry, PageNum, VirtAddr};
use crate::memory::MemoryManager;
use crate::page_table::{PageSize, Translation};
use crate::paging::{contiguous_runs, FaultOutcome, Pager, PagingMode};
use crate::tlb::{MshrKey, MshrOutcome, MshrSet, TlbEntry, TlbHierarchy};
use crate::walker::WalkerModel;
use event::EventQueue;
use workload::{layout_buffers, kernel_space_seed, split_accesses, warp_seed, BufferLayout, KernelSpace, ResolvedApp};

const SRC_WALKER: u32 = u32::MAX - 1;
const SRC_BUS: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
enum Ev {
    Issue(u32),
    L2Lookup(u32),
    WalkRequest(u32),
    WalkSubmit(MshrKey),
    WalkDone(MshrKey),
    DataStart(u32, PageNum),
    Retire(u32),
    TransferDone(u64),
}

struct Warp {
    app: usize,
    core: usize,
    rng: ChaCha8Rng,
    cursor: u64,
    remaining: u64,
    /// In-flight access: (virtual page, line).
    pending: Option<(PageNum, u64)>,
}

#[derive(Default, Clone, Copy)]
struct Counters {
    l1: LevelCounts,
    l2: LevelCounts,
    l1_steady: LevelCounts,
    l2_steady: LevelCounts,
    walks: u64,
    retired: u64,
}

struct App {
    asid: Asid,
    spec: ResolvedApp,
    layouts: Vec<BufferLayout>,
    live: Vec<bool>,
    cores: usize,
    warps: Vec<u32>,
    kernel: usize,
    space: Option<KernelSpace>,
    active_warps: usize,
    warmup_at: u64,
    finish: Option<u64>,
    c: Counters,
    last: Counters,
    walk_block_until: u64,
    peak_bloat: f64,
}

impl App {
    fn steady(&self) -> bool {
        self.c.retired >= self.warmup_at
    }
}

struct Sim<'a> {
    cfg: &'a RunConfig,
    g: PageGeometry,
    q: EventQueue<Ev>,
    mm: MemoryManager,
    tlbs: TlbHierarchy,
    walker: WalkerModel<MshrKey>,
    mshr: MshrSet<u32>,
    mshr_wait: VecDeque<u32>,
    pager: Pager<u32>,
    warps: Vec<Warp>,
    apps: Vec<App>,
    channel_free: Vec<u64>,
    stall_until: u64,
    stall_total: u64,
    next_interval: u64,
    intervals: Vec<metrics::IntervalRow>,
    translations_checked: u64,
    oracle_mismatches: u64,
    content_violations: u64,
    full_after_alloc: u64,
    coalesced_after_alloc: u64,
    peak_mixed: u64,
    peak_active: usize,
}

/// Runs one simulation to completion.
pub fn run(cfg: &RunConfig) -> Result<MetricSet> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg)?;
    let all: Vec<usize> = (0..sim.apps.len()).collect();
    sim.launch(&all, 0)?;
    sim.event_loop()?;
    sim.finish()
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        let g = cfg.geometry;
        let resolved = cfg.workload.resolve(cfg.seed)?;
        let cores = cfg.cores_per_app();
        let wpc = cfg.warps_per_core_per_app();
        let mut warps = Vec::new();
        let mut apps = Vec::new();
        for (i, spec) in resolved.into_iter().enumerate() {
            let my_cores = &cores[i];
            let n = my_cores.len() * wpc;
            let ids: Vec<u32> = (warps.len() as u32..(warps.len() + n) as u32).collect();
            for k in 0..n {
                warps.push(Warp {
                    app: i,
                    core: my_cores[k % my_cores.len()],
                    rng: ChaCha8Rng::seed_from_u64(0),
                    cursor: 0,
                    remaining: 0,
                    pending: None,
                });
            }
            let total = spec.profile.total_accesses();
            apps.push(App {
                asid: spec.asid,
                layouts: layout_buffers(&spec.profile, &g),
                live: vec![false; spec.profile.buffers.len()],
                cores: my_cores.len(),
                warps: ids,
                kernel: 0,
                space: None,
                active_warps: 0,
                warmup_at: (total as f64 * cfg.system.warmup_fraction).ceil() as u64,
                finish: None,
                c: Counters::default(),
                last: Counters::default(),
                walk_block_until: 0,
                peak_bloat: 1.0,
                spec,
            });
        }
        Ok(Self {
            cfg,
            g,
            q: EventQueue::new(),
            mm: MemoryManager::new(cfg.memory_config()),
            tlbs: TlbHierarchy::new(cfg.tlb, g, cfg.system.cores),
            walker: WalkerModel::new(cfg.walker),
            mshr: MshrSet::new(cfg.tlb.mshr_capacity),
            mshr_wait: VecDeque::new(),
            pager: Pager::new(cfg.paging, g, cfg.bus),
            warps,
            apps,
            channel_free: vec![0; cfg.system.dram_channels],
            stall_until: 0,
            stall_total: 0,
            next_interval: cfg.system.interval_cycles,
            intervals: Vec::new(),
            translations_checked: 0,
            oracle_mismatches: 0,
            content_violations: 0,
            full_after_alloc: 0,
            coalesced_after_alloc: 0,
            peak_mixed: 0,
            peak_active: 0,
        })
    }

    fn event_loop(&mut self) -> Result<()> {
        while let Some((t, src, ev)) = self.q.pop() {
            while t >= self.next_interval {
                self.snapshot(self.next_interval);
                self.next_interval += self.cfg.system.interval_cycles;
            }
            // Whole-GPU compaction stall: nothing on the GPU side advances.
            if t < self.stall_until && !matches!(ev, Ev::TransferDone(_)) {
                self.q.push(self.stall_until, src, ev);
                continue;
            }
            match ev {
                Ev::Issue(w) => self.issue(w, t)?,
                Ev::L2Lookup(w) => self.l2_lookup(w, t),
                Ev::WalkRequest(w) => self.walk_request(w, t),
                Ev::WalkSubmit(key) => self.walk_submit(key, t),
                Ev::WalkDone(key) => self.walk_done(key, t)?,
                Ev::DataStart(w, ppage) => self.data_start(w, ppage, t),
                Ev::Retire(w) => self.retire(w, t)?,
                Ev::TransferDone(id) => self.transfer_done(id, t)?,
            }
        }
        if let Some(a) = self.apps.iter().find(|a| a.finish.is_none()) {
            return Err(Error::Contract(format!("asid {} never finished", a.asid)));
        }
        Ok(())
    }

    // ---- kernels and allocation ----

    fn launch(&mut self, apps: &[usize], t: u64) -> Result<()> {
        let slots = self.g.slots_per_large_frame();
        let mut batches: Vec<VecDeque<(usize, PageNum, u64)>> = Vec::new();
        for &ai in apps {
            let app = &mut self.apps[ai];
            let k = app.kernel as u32;
            let mut q = VecDeque::new();
            for (b, spec) in app.spec.profile.buffers.iter().enumerate() {
                if spec.alloc_kernel != k {
                    continue;
                }
                app.live[b] = true;
                let l = app.layouts[b];
                if self.cfg.paging.is_demand() {
                    self.pager.declare(app.asid, l.first_page, l.pages);
                    continue;
                }
                // one en-masse batch per virtual large frame
                let mut p = l.first_page;
                let end = l.first_page + l.pages;
                while p < end {
                    let n = ((p / slots + 1) * slots).min(end) - p;
                    q.push_back((ai, p, n));
                    p += n;
                }
            }
            batches.push(q);
        }
        // interleave the batches of applications launching together
        while batches.iter().any(|q| !q.is_empty()) {
            for q in &mut batches {
                if let Some((ai, first, n)) = q.pop_front() {
                    self.alloc_batch(ai, first, n, t)?;
                    self.pager.prefault(self.apps[ai].asid, n);
                }
            }
        }
        self.after_alloc_phase(apps);
        if self.cfg.verify {
            self.content_violations += self.mm.verify_contents();
        }
        for &ai in apps {
            self.start_kernel(ai, t)?;
        }
        Ok(())
    }

    fn alloc_batch(&mut self, ai: usize, first: PageNum, n: u64, t: u64) -> Result<()> {
        let asid = self.apps[ai].asid;
        let out = self.mm.allocate(asid, VirtAddr(first * self.g.base_page_bytes), n, &mut self.tlbs)?;
        for (owner, _) in &out.coalesced {
            let block = t + self.cfg.coalescer.metadata_latency;
            let a = &mut self.apps[owner.0 as usize];
            a.walk_block_until = a.walk_block_until.max(block);
        }
        self.charge_stall(t, out.compaction.stall_cycles);
        Ok(())
    }

    fn after_alloc_phase(&mut self, apps: &[usize]) {
        let alloc = self.mm.allocator();
        let full = alloc.frames().iter().filter(|f| f.is_full()).count() as u64;
        if full >= self.full_after_alloc {
            self.full_after_alloc = full;
            self.coalesced_after_alloc = alloc.frames().iter().filter(|f| f.is_full() && f.coalesced).count() as u64;
        }
        self.peak_mixed = self.peak_mixed.max(alloc.frames().iter().filter(|f| f.is_mixed()).count() as u64);
        for &ai in apps {
            let b = alloc.memory_bloat(self.apps[ai].asid);
            let a = &mut self.apps[ai];
            a.peak_bloat = a.peak_bloat.max(b);
        }
    }

    fn charge_stall(&mut self, t: u64, cycles: u64) {
        if cycles > 0 {
            self.stall_until = self.stall_until.max(t) + cycles;
            self.stall_total += cycles;
        }
    }

    fn start_kernel(&mut self, ai: usize, t: u64) -> Result<()> {
        let app = &mut self.apps[ai];
        let k = app.kernel;
        let kernel = &app.spec.profile.kernels[k];
        let space = KernelSpace::new(kernel, &app.layouts, &self.g, kernel_space_seed(app.spec.trace_seed, k));
        let n = app.warps.len();
        let split = split_accesses(kernel.accesses, n);
        let mut active = 0;
        for (i, &w) in app.warps.iter().enumerate() {
            let warp = &mut self.warps[w as usize];
            warp.rng = ChaCha8Rng::seed_from_u64(warp_seed(app.spec.trace_seed, k, i));
            warp.cursor = space.start_cursor(i, n);
            warp.remaining = split[i];
            if split[i] > 0 {
                active += 1;
                self.q.push(t, w, Ev::Issue(w));
            }
        }
        app.space = Some(space);
        app.active_warps = active;
        if active == 0 {
            self.end_kernel(ai, t)?;
        }
        Ok(())
    }

    fn end_kernel(&mut self, ai: usize, t: u64) -> Result<()> {
        let k = self.apps[ai].kernel as u32;
        let frees: Vec<usize> = self.apps[ai]
            .spec
            .profile
            .buffers
            .iter()
            .enumerate()
            .filter(|(b, s)| s.free_after_kernel == Some(k) && self.apps[ai].live[*b])
            .map(|(b, _)| b)
            .collect();
        for b in frees {
            self.free_buffer(ai, b, t)?;
        }
        let app = &mut self.apps[ai];
        app.kernel += 1;
        app.space = None;
        if app.kernel < app.spec.profile.kernels.len() {
            return self.launch(&[ai], t);
        }
        app.finish = Some(t);
        let live: Vec<usize> = (0..app.live.len()).filter(|&b| app.live[b]).collect();
        for b in live {
            self.free_buffer(ai, b, t)?;
        }
        Ok(())
    }

    fn free_buffer(&mut self, ai: usize, b: usize, t: u64) -> Result<()> {
        let asid = self.apps[ai].asid;
        let l = self.apps[ai].layouts[b];
        self.apps[ai].live[b] = false;
        if self.cfg.paging.is_demand() {
            self.pager.retire(asid, l.first_page);
        }
        let resident: Vec<PageNum> = (l.first_page..l.first_page + l.pages)
            .filter(|&p| self.mm.is_resident(asid, p))
            .collect();
        let before = self.cfg.verify.then(|| self.mm.content_multiset());
        for (first, n) in contiguous_runs(&resident) {
            let out = self.mm.deallocate(asid, VirtAddr(first * self.g.base_page_bytes), n, &mut self.tlbs)?;
            self.charge_stall(t, out.compaction.stall_cycles);
        }
        if let Some(before) = before {
            let freed = l.first_page..l.first_page + l.pages;
            let expected: Vec<_> = before
                .into_iter()
                .filter(|&(a, vp, _)| a != asid || !freed.contains(&vp))
                .collect();
            if expected != self.mm.content_multiset() {
                self.content_violations += 1;
            }
            self.content_violations += self.mm.verify_contents();
        }
        Ok(())
    }

    // ---- the per-access pipeline ----

    fn next_access(&mut self, w: u32) -> (PageNum, u64) {
        let warp = &mut self.warps[w as usize];
        if let Some(p) = warp.pending {
            return p;
        }
        let space = self.apps[warp.app].space.as_ref().expect("kernel running");
        let (l, line) = space.next(&mut warp.rng, &mut warp.cursor);
        let access = (space.vpage(l), line);
        warp.pending = Some(access);
        access
    }

    fn check(&mut self, asid: Asid, vpage: PageNum, t: Translation) {
        if !self.cfg.verify {
            return;
        }
        self.translations_checked += 1;
        let ok = self
            .mm
            .table(asid)
            .is_some_and(|pt| pt.oracle().get(asid, vpage) == Some(t.ppage) && pt.agrees_with_oracle(vpage));
        if !ok {
            self.oracle_mismatches += 1;
        }
    }

    fn issue(&mut self, w: u32, t: u64) -> Result<()> {
        let (vpage, _) = self.next_access(w);
        let (ai, core) = (self.warps[w as usize].app, self.warps[w as usize].core);
        let asid = self.apps[ai].asid;
        if self.cfg.mode == Mode::Ideal {
            let app = &mut self.apps[ai];
            app.c.l1.hits += 1;
            if app.steady() {
                app.c.l1_steady.hits += 1;
            }
            let ready = t + self.cfg.tlb.l1_latency;
            let tr = self.mm.table(asid).and_then(|pt| pt.walk_page(vpage).translation);
            return match tr {
                Some(tr) => {
                    self.check(asid, vpage, tr);
                    self.q.push(ready, w, Ev::DataStart(w, tr.ppage));
                    Ok(())
                }
                None => self.fault(w, vpage, ready),
            };
        }
        let p = self.tlbs.probe_l1(core, asid, vpage, t);
        let app = &mut self.apps[ai];
        let hit = p.translation.is_some();
        let steady = app.steady();
        bump(&mut app.c.l1, hit);
        if steady {
            bump(&mut app.c.l1_steady, hit);
        }
        match p.translation {
            Some(tr) => {
                self.check(asid, vpage, tr);
                self.q.push(p.ready_at, w, Ev::DataStart(w, tr.ppage));
            }
            None => self.q.push(p.ready_at, w, Ev::L2Lookup(w)),
        }
        Ok(())
    }

    fn l2_lookup(&mut self, w: u32, t: u64) {
        let (vpage, _) = self.warps[w as usize].pending.expect("pending access");
        let (ai, core) = (self.warps[w as usize].app, self.warps[w as usize].core);
        let asid = self.apps[ai].asid;
        let p = self.tlbs.probe_l2(asid, vpage, t);
        let app = &mut self.apps[ai];
        let hit = p.translation.is_some();
        let steady = app.steady();
        bump(&mut app.c.l2, hit);
        if steady {
            bump(&mut app.c.l2_steady, hit);
        }
        match p.translation {
            Some(tr) => {
                self.tlbs.fill_l1(core, TlbEntry::from_translation(asid, vpage, tr, &self.g));
                self.check(asid, vpage, tr);
                self.q.push(p.ready_at, w, Ev::DataStart(w, tr.ppage));
            }
            None => self.q.push(p.ready_at, w, Ev::WalkRequest(w)),
        }
    }

    fn mshr_key(&self, asid: Asid, vpage: PageNum) -> MshrKey {
        let vframe = self.g.frame_of_page(vpage);
        match self.mm.table(asid) {
            Some(pt) if pt.is_coalesced(vframe) => MshrKey {
                asid,
                size: PageSize::Large,
                tag: vframe,
            },
            _ => MshrKey {
                asid,
                size: PageSize::Base,
                tag: vpage,
            },
        }
    }

    fn walk_request(&mut self, w: u32, t: u64) {
        let (vpage, _) = self.warps[w as usize].pending.expect("pending access");
        let ai = self.warps[w as usize].app;
        let key = self.mshr_key(self.apps[ai].asid, vpage);
        // No overtaking warps already queued for an MSHR.
        if !self.mshr_wait.is_empty() && !self.mshr.is_pending(&key) {
            self.mshr_wait.push_back(w);
            return;
        }
        self.register_walk(w, key, t);
    }

    fn register_walk(&mut self, w: u32, key: MshrKey, t: u64) {
        let ai = self.warps[w as usize].app;
        match self.mshr.register(key, w) {
            MshrOutcome::Allocated => {
                let at = t.max(self.apps[ai].walk_block_until);
                self.q.push(at, SRC_WALKER, Ev::WalkSubmit(key));
            }
            MshrOutcome::Merged => {}
            MshrOutcome::Full => self.mshr_wait.push_back(w),
        }
    }

    fn walk_submit(&mut self, key: MshrKey, t: u64) {
        let vpage = match key.size {
            PageSize::Base => key.tag,
            PageSize::Large => self.g.first_page_of_frame(key.tag),
        };
        let levels = self.mm.table(key.asid).map_or(1, |pt| pt.walk_page(vpage).levels);
        if let Some(s) = self.walker.submit(t, levels, key) {
            self.q.push(s.done, SRC_WALKER, Ev::WalkDone(s.ticket));
        }
        self.peak_active = self.peak_active.max(self.walker.active());
        self.apps[key.asid.0 as usize].c.walks += 1;
    }

    fn walk_done(&mut self, key: MshrKey, t: u64) -> Result<()> {
        if let Some(s) = self.walker.complete(t) {
            self.q.push(s.done, SRC_WALKER, Ev::WalkDone(s.ticket));
        }
        for w in self.mshr.release(&key) {
            let (vpage, _) = self.warps[w as usize].pending.expect("pending access");
            let core = self.warps[w as usize].core;
            match self.mm.table(key.asid).and_then(|pt| pt.walk_page(vpage).translation) {
                Some(tr) => {
                    let e = TlbEntry::from_translation(key.asid, vpage, tr, &self.g);
                    self.tlbs.fill_l2(e);
                    self.tlbs.fill_l1(core, e);
                    self.check(key.asid, vpage, tr);
                    self.q.push(t, w, Ev::DataStart(w, tr.ppage));
                }
                None => self.fault(w, vpage, t)?,
            }
        }
        while !self.mshr.is_full() {
            let Some(w) = self.mshr_wait.pop_front() else { break };
            let (vpage, _) = self.warps[w as usize].pending.expect("pending access");
            let key = self.mshr_key(self.apps[self.warps[w as usize].app].asid, vpage);
            self.register_walk(w, key, t);
        }
        Ok(())
    }

    fn fault(&mut self, w: u32, vpage: PageNum, t: u64) -> Result<()> {
        let asid = self.apps[self.warps[w as usize].app].asid;
        if self.cfg.paging == PagingMode::Prefault {
            return Err(Error::Contract(format!(
                "asid {asid} touched non-resident page {vpage:#x} with everything prefaulted"
            )));
        }
        let mm = &self.mm;
        match self.pager.fault(asid, vpage, t, w, |p| mm.is_resident(asid, p))? {
            FaultOutcome::Started { id, done } => self.q.push(done, SRC_BUS, Ev::TransferDone(id)),
            FaultOutcome::Joined { .. } => {}
        }
        Ok(())
    }

    fn transfer_done(&mut self, id: u64, t: u64) -> Result<()> {
        let tr = self.pager.complete(id);
        let ai = tr.asid.0 as usize;
        let mut pages = tr.pages;
        pages.sort_unstable();
        for (first, n) in contiguous_runs(&pages) {
            self.alloc_batch(ai, first, n, t)?;
        }
        self.after_alloc_phase(&[ai]);
        for (w, _) in tr.waiters {
            self.q.push(t, w, Ev::Issue(w));
        }
        Ok(())
    }

    fn data_start(&mut self, w: u32, ppage: PageNum, t: u64) {
        let (_, line) = self.warps[w as usize].pending.expect("pending access");
        let lines = (self.g.base_page_bytes / workload::LINE_BYTES).max(1);
        let ch = ((ppage * lines + line) % self.channel_free.len() as u64) as usize;
        let start = t.max(self.channel_free[ch]);
        self.channel_free[ch] = start + 1;
        self.q.push(start + self.cfg.system.dram_latency, w, Ev::Retire(w));
    }

    fn retire(&mut self, w: u32, t: u64) -> Result<()> {
        let warp = &mut self.warps[w as usize];
        warp.pending = None;
        warp.remaining -= 1;
        let ai = warp.app;
        let app = &mut self.apps[ai];
        app.c.retired += 1;
        if warp.remaining > 0 {
            let d = app.space.as_ref().expect("kernel running").delay(&mut warp.rng);
            self.q.push(t + d, w, Ev::Issue(w));
            return Ok(());
        }
        app.active_warps -= 1;
        if app.active_warps == 0 {
            self.end_kernel(ai, t)?;
        }
        Ok(())
    }

    // ---- reporting ----

    fn snapshot(&mut self, cycle: u64) {
        let mut total = metrics::IntervalRow {
            cycle,
            ..Default::default()
        };
        for app in &mut self.apps {
            let (c, l) = (app.c, app.last);
            let row = metrics::IntervalRow {
                cycle,
                asid: Some(app.asid.0),
                l1_hits: c.l1.hits - l.l1.hits,
                l1_misses: c.l1.misses - l.l1.misses,
                l2_hits: c.l2.hits - l.l2.hits,
                l2_misses: c.l2.misses - l.l2.misses,
                walks: c.walks - l.walks,
                retired: c.retired - l.retired,
            };
            total.l1_hits += row.l1_hits;
            total.l1_misses += row.l1_misses;
            total.l2_hits += row.l2_hits;
            total.l2_misses += row.l2_misses;
            total.walks += row.walks;
            total.retired += row.retired;
            self.intervals.push(row);
            app.last = c;
        }
        self.intervals.push(total);
    }

    fn finish(mut self) -> Result<MetricSet> {
        let cycles = self.apps.iter().filter_map(|a| a.finish).max().unwrap_or(0);
        if self.apps.iter().any(|a| a.c.retired != a.last.retired) || self.intervals.is_empty() {
            self.snapshot(cycles);
        }
        let cstats = self.mm.compaction_stats();
        let co = self.mm.coalescer().stats();
        let apps: Vec<AppMetrics> = self
            .apps
            .iter()
            .map(|a| {
                let p = self.pager.stats(a.asid);
                let finish = a.finish.unwrap_or(0);
                AppMetrics {
                    asid: a.asid.0,
                    profile: a.spec.profile.name.clone(),
                    cores: a.cores,
                    warps: a.warps.len(),
                    retired: a.c.retired,
                    finish_cycle: finish,
                    ipc: if finish == 0 { 0.0 } else { a.c.retired as f64 / finish as f64 },
                    l1: a.c.l1,
                    l2: a.c.l2,
                    l1_steady: a.c.l1_steady,
                    l2_steady: a.c.l2_steady,
                    walks: a.c.walks,
                    faults: p.faults,
                    bytes_over_bus: p.bytes_over_bus,
                    fault_stall_cycles: p.fault_stall_cycles,
                    prefault_bytes: p.prefault_bytes,
                    prefault_cycles: p.prefault_cycles,
                    peak_bloat: a.peak_bloat,
                }
            })
            .collect();
        let ws = self.walker.stats();
        let ms = self.mshr.stats();
        Ok(MetricSet {
            workload: self.cfg.workload.name.clone(),
            mode: self.cfg.mode.label().into(),
            paging: self.cfg.paging.label().into(),
            seed: self.cfg.seed,
            cycles,
            retired: apps.iter().map(|a| a.retired).sum(),
            expected_accesses: self.apps.iter().map(|a| a.spec.profile.total_accesses()).sum(),
            events: self.q.popped(),
            apps,
            walks: ws.walks,
            peak_active_walks: self.peak_active.max(ws.peak_active),
            walker_queued: ws.queued,
            mshr_merges: ms.merges,
            mshr_full_stalls: ms.full_stalls,
            transfers: self.pager.bus().transfers(),
            transfer_log: self.pager.bus().log(),
            frames_checked: co.frames_checked,
            frames_coalesced: co.frames_coalesced,
            full_frames_after_alloc: self.full_after_alloc,
            coalesced_frames_after_alloc: self.coalesced_after_alloc,
            splinters: cstats.splinters,
            compactions: cstats.compactions,
            migrated_pages: cstats.migrated_pages,
            freed_frames: cstats.freed_frames,
            compaction_stall_cycles: self.stall_total,
            soft_guarantee_violations: self.mm.allocator().stats().soft_guarantee_violations,
            peak_mixed_frames: self.peak_mixed,
            translations_checked: self.translations_checked,
            oracle_mismatches: self.oracle_mismatches,
            content_violations: self.content_violations,
            intervals: self.intervals,
        })
    }
}

fn bump(c: &mut LevelCounts, hit: bool) {
    if hit {
        c.hits += 1;
    } else {
        c.misses += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::workload::{AppEntry, BufferSpec, KernelSpec};

    fn small(profile: AppProfile, apps: usize, mode: Mode) -> RunConfig {
        let mut c = RunConfig::default();
        c.mode = mode;
        c.system.cores = 4;
        c.system.warps_per_core = 8;
        c.system.gpu_memory_bytes = 256 << 20;
        c.system.interval_cycles = 20_000;
        c.workload = WorkloadSpec {
            name: "t".into(),
            apps: (0..apps)
                .map(|_| AppEntry {
                    profile: profile.name.clone(),
                    trace_seed: None,
                })
                .collect(),
            profiles: vec![profile],
            access_scale: 1.0,
        };
        c
    }

    fn profile(mb: u64, pattern: Pattern, accesses: u64) -> AppProfile {
        AppProfile {
            name: "p".into(),
            buffers: vec![BufferSpec {
                bytes: mb << 20,
                alloc_kernel: 0,
                free_after_kernel: None,
                touch_fraction: 1.0,
            }],
            kernels: vec![KernelSpec {
                accesses,
                buffers: vec![0],
                pattern,
                compute_delay: [50, 100],
            }],
        }
    }

    #[test]
    fn tiny_working_set_hits_l1_in_every_mode() {
        // 256KB: 64 pages, within the 128-entry L1 base reach.
        let p = AppProfile {
            buffers: vec![BufferSpec {
                bytes: 256 << 10,
                alloc_kernel: 0,
                free_after_kernel: None,
                touch_fraction: 1.0,
            }],
            ..profile(1, Pattern::Uniform, 40_000)
        };
        let mut ipcs = vec![];
        for mode in Mode::ALL {
            let m = run(&small(p.clone(), 1, mode)).unwrap();
            assert!(m.l1_hit_rate() > 0.99, "{mode:?} {}", m.l1_hit_rate());
            ipcs.push(m.ipc());
        }
        let (lo, hi) = ipcs.iter().fold((f64::MAX, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
        assert!((hi - lo) / hi < 0.02, "{ipcs:?}");
    }

    #[test]
    fn work_is_conserved_and_verified() {
        for mode in Mode::ALL {
            let m = run(&small(profile(8, Pattern::Uniform, 20_000), 2, mode)).unwrap();
            assert_eq!(m.retired, m.expected_accesses);
            assert_eq!(m.oracle_mismatches, 0);
            assert_eq!(m.content_violations, 0);
            assert!(m.translations_checked >= m.retired);
            assert!(m.peak_active_walks <= 64);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let c = small(profile(8, Pattern::Hotset { access_fraction: 0.9, page_fraction: 0.1 }, 20_000), 2, Mode::Mosaic);
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.summary_csv(), b.summary_csv());
        assert_eq!(a.interval_csv(), b.interval_csv());
    }

    #[test]
    fn mosaic_coalesces_and_gpu_mmu_does_not() {
        let m = run(&small(profile(8, Pattern::Uniform, 5_000), 2, Mode::Mosaic)).unwrap();
        assert_eq!(m.frames_coalesced, 8);
        let mut c = small(profile(8, Pattern::Uniform, 5_000), 2, Mode::GpuMmu);
        c.system.gpu_mmu_coalescing = true;
        let g = run(&c).unwrap();
        assert_eq!(g.frames_coalesced, 0);
        assert!(g.frames_checked > 0);
    }

    #[test]
    fn demand_paging_faults_once_per_touched_page() {
        let mut c = small(profile(4, Pattern::Uniform, 4_000), 1, Mode::Mosaic);
        c.paging = PagingMode::DemandBase;
        let m = run(&c).unwrap();
        let touched: std::collections::BTreeSet<_> = workload::generate_traces(
            &c.workload.resolve(c.seed).unwrap()[0],
            &c.geometry,
            32,
        )
        .into_iter()
        .flatten()
        .flatten()
        .collect();
        assert_eq!(m.transfers, touched.len() as u64);
        assert_eq!(m.bytes_over_bus(), touched.len() as u64 * 4096);
        assert_eq!(m.retired, 4_000);
        assert_eq!(m.oracle_mismatches, 0);
    }

    #[test]
    fn freeing_a_sharing_buffer_splinters_and_compacts() {
        let mut p = profile(8, Pattern::Uniform, 4_000);
        // Packed after the 8MB buffer: 1.5MB + 0.5MB share one virtual frame.
        p.buffers.push(BufferSpec {
            bytes: 1536 << 10,
            alloc_kernel: 0,
            free_after_kernel: Some(0),
            touch_fraction: 1.0,
        });
        p.buffers.push(BufferSpec {
            bytes: 512 << 10,
            alloc_kernel: 0,
            free_after_kernel: None,
            touch_fraction: 1.0,
        });
        p.kernels[0].buffers = vec![0, 1, 2];
        p.kernels.push(KernelSpec {
            accesses: 2_000,
            buffers: vec![0, 2],
            pattern: Pattern::Uniform,
            compute_delay: [50, 100],
        });
        let m = run(&small(p, 1, Mode::Mosaic)).unwrap();
        assert_eq!(m.frames_coalesced, 5);
        assert!(m.splinters >= 1);
        assert_eq!(m.content_violations, 0);
        assert_eq!(m.oracle_mismatches, 0);
        assert_eq!(m.retired, 6_000);
    }
}
