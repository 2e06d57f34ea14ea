//! Shared page-table walker with a bounded number of concurrent walks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkerConfig {
    pub max_concurrent_walks: usize,
    /// Cost of one page-table level access, in cycles.
    pub level_latency: u64,
}

impl Default for WalkerConfig {
    fn default() -> Self {
        Self {
            max_concurrent_walks: 64,
            level_latency: 100,
        }
    }
}

impl WalkerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_concurrent_walks == 0 {
            return Err(ConfigError::invalid(
                "walker.max_concurrent_walks",
                "must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn walk_latency(&self, levels: u32) -> u64 {
        u64::from(levels) * self.level_latency
    }
}

/// A walk that has been granted a walker slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StartedWalk<T> {
    pub ticket: T,
    pub start: u64,
    pub done: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WalkerStats {
    pub walks: u64,
    pub queued: u64,
    pub peak_active: usize,
    pub queue_cycles: u64,
}

/// Timing model of the walker: at most `max_concurrent_walks` walks are
/// active, the rest wait in FIFO order and start when an active walk retires.
#[derive(Debug, Clone)]
pub struct WalkerModel<T> {
    config: WalkerConfig,
    active: usize,
    pending: VecDeque<(T, u32, u64)>,
    stats: WalkerStats,
}

impl<T> WalkerModel<T> {
    pub fn new(config: WalkerConfig) -> Self {
        Self {
            config,
            active: 0,
            pending: VecDeque::new(),
            stats: WalkerStats::default(),
        }
    }

    pub fn config(&self) -> &WalkerConfig {
        &self.config
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn stats(&self) -> &WalkerStats {
        &self.stats
    }

    /// Requests a walk of `levels` table accesses at cycle `now`. Returns the
    /// started walk if a slot was free; otherwise the walk is queued.
    pub fn submit(&mut self, now: u64, levels: u32, ticket: T) -> Option<StartedWalk<T>> {
        self.stats.walks += 1;
        if self.active < self.config.max_concurrent_walks {
            Some(self.start(now, now, levels, ticket))
        } else {
            self.stats.queued += 1;
            self.pending.push_back((ticket, levels, now));
            None
        }
    }

    /// Retires one active walk at `now`, starting the oldest queued walk if any.
    pub fn complete(&mut self, now: u64) -> Option<StartedWalk<T>> {
        assert!(self.active > 0, "walker completion with no active walk");
        self.active -= 1;
        let (ticket, levels, requested) = self.pending.pop_front()?;
        Some(self.start(now, requested, levels, ticket))
    }

    fn start(&mut self, now: u64, requested: u64, levels: u32, ticket: T) -> StartedWalk<T> {
        self.active += 1;
        self.stats.peak_active = self.stats.peak_active.max(self.active);
        self.stats.queue_cycles += now - requested;
        StartedWalk {
            ticket,
            start: now,
            done: now + self.config.walk_latency(levels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::page_table::{BASE_WALK_LEVELS, LARGE_WALK_LEVELS};

    #[test]
    fn idle_walker_latency_by_depth() {
        let mut w = WalkerModel::new(WalkerConfig::default());
        let base = w.submit(0, BASE_WALK_LEVELS, 'a').unwrap();
        assert_eq!(base.done - base.start, 400);
        let large = w.submit(0, LARGE_WALK_LEVELS, 'b').unwrap();
        assert_eq!(large.done - large.start, 300);
    }

    #[test]
    fn sixty_fifth_walk_queues_until_a_slot_frees() {
        let mut w = WalkerModel::new(WalkerConfig::default());
        let started: Vec<_> = (0..65).filter_map(|i| w.submit(10, 4, i)).collect();
        assert_eq!(started.len(), 64);
        assert_eq!(w.active(), 64);
        assert_eq!(w.pending(), 1);
        let next = w.complete(410).unwrap();
        assert_eq!(next.ticket, 64);
        assert_eq!(next.start, 410);
        assert_eq!(next.done, 810);
        assert_eq!(w.active(), 64);
        assert_eq!(w.stats().peak_active, 64);
        assert_eq!(w.stats().queue_cycles, 400);
    }

    #[test]
    fn active_never_exceeds_bound() {
        let mut w = WalkerModel::new(WalkerConfig {
            max_concurrent_walks: 3,
            level_latency: 1,
        });
        let mut now = 0;
        for i in 0..50u32 {
            w.submit(now, 1 + i % 4, i);
            assert!(w.active() <= 3);
            if i % 2 == 0 && w.active() > 0 {
                now += 1;
                w.complete(now);
            }
        }
        assert_eq!(w.stats().peak_active, 3);
    }
}
