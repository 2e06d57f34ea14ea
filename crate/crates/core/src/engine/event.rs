//! Deterministic event queue ordered by (cycle, source, sequence).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug)]
struct Entry<E> {
    cycle: u64,
    source: u32,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, o: &Self) -> bool {
        self.key() == o.key()
    }
}

impl<E> Eq for Entry<E> {}

impl<E> Entry<E> {
    fn key(&self) -> (u64, u32, u64) {
        (self.cycle, self.source, self.seq)
    }
}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, o: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        o.key().cmp(&self.key())
    }
}

#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    popped: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            popped: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, cycle: u64, source: u32, event: E) {
        self.seq += 1;
        self.heap.push(Entry {
            cycle,
            source,
            seq: self.seq,
            event,
        });
    }

    /// Earliest event as `(cycle, source, event)`.
    pub fn pop(&mut self) -> Option<(u64, u32, E)> {
        let e = self.heap.pop()?;
        self.popped += 1;
        Some((e.cycle, e.source, e.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn popped(&self) -> u64 {
        self.popped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_cycle_then_source_then_insertion() {
        let mut q = EventQueue::new();
        q.push(5, 2, "c");
        q.push(5, 1, "b");
        q.push(1, 9, "a");
        q.push(5, 1, "b2");
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|e| e.2)).collect();
        assert_eq!(order, vec!["a", "b", "b2", "c"]);
        assert_eq!(q.popped(), 4);
    }
}
