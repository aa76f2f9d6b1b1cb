//! Bounded FIFO of predicted blocks awaiting speculative download.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::trace::{BlockId, FileId};

pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedBlock {
    pub block: BlockId,
    /// When the prediction that queued the block was made.
    pub predicted_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    Added,
    Duplicate,
    /// Added after dropping the oldest entry.
    Displaced(BlockId),
}

/// Circular download queue. Duplicates are filtered on enqueue; when full,
/// the oldest entry is dropped and counted.
#[derive(Debug, Clone)]
pub struct FetchQueue {
    capacity: usize,
    items: VecDeque<QueuedBlock>,
    queued: HashSet<BlockId>,
    dropped: u64,
}

impl Default for FetchQueue {
    fn default() -> Self {
        FetchQueue::new(DEFAULT_QUEUE_CAPACITY)
    }
}

impl FetchQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        FetchQueue {
            capacity,
            items: VecDeque::new(),
            queued: HashSet::new(),
            dropped: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, block: &BlockId) -> bool {
        self.queued.contains(block)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn push(&mut self, block: BlockId, predicted_ms: u64) -> Enqueued {
        if !self.queued.insert(block) {
            return Enqueued::Duplicate;
        }
        let mut out = Enqueued::Added;
        if self.items.len() == self.capacity {
            let old = self.items.pop_front().expect("full queue");
            self.queued.remove(&old.block);
            self.dropped += 1;
            out = Enqueued::Displaced(old.block);
        }
        self.items.push_back(QueuedBlock { block, predicted_ms });
        out
    }

    /// Enqueues in order and returns the blocks dropped to make room.
    pub fn extend<I: IntoIterator<Item = BlockId>>(&mut self, blocks: I, predicted_ms: u64) -> Vec<BlockId> {
        let mut dropped = Vec::new();
        for b in blocks {
            if let Enqueued::Displaced(old) = self.push(b, predicted_ms) {
                dropped.push(old);
            }
        }
        dropped
    }

    pub fn pop(&mut self) -> Option<QueuedBlock> {
        let q = self.items.pop_front()?;
        self.queued.remove(&q.block);
        Some(q)
    }

    pub fn pop_batch(&mut self, max: usize) -> Vec<QueuedBlock> {
        let n = max.min(self.items.len());
        let out: Vec<QueuedBlock> = self.items.drain(..n).collect();
        for q in &out {
            self.queued.remove(&q.block);
        }
        out
    }
}

/// A run of consecutive blocks of one file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRange {
    pub file: FileId,
    pub first: u32,
    pub count: u32,
}

impl BlockRange {
    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        (self.first..self.first + self.count).map(|i| BlockId {
            file: self.file,
            index: i,
        })
    }
}

/// Merges neighbours in the given order into ranges; order is preserved,
/// so only adjacent ascending runs coalesce.
pub fn coalesce(blocks: &[BlockId]) -> Vec<BlockRange> {
    let mut out: Vec<BlockRange> = Vec::new();
    for b in blocks {
        if let Some(last) = out.last_mut() {
            if last.file == b.file && last.first.checked_add(last.count) == Some(b.index) {
                last.count += 1;
                continue;
            }
        }
        out.push(BlockRange {
            file: b.file,
            first: b.index,
            count: 1,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blk(i: u32) -> BlockId {
        BlockId::new(0, i)
    }

    #[test]
    fn contiguous_blocks_coalesce() {
        let r = coalesce(&[blk(5), blk(6), blk(7)]);
        assert_eq!(r, vec![BlockRange { file: FileId(0), first: 5, count: 3 }]);
        let r = coalesce(&[blk(5), blk(7), BlockId::new(1, 8), BlockId::new(1, 9)]);
        assert_eq!(r.len(), 3);
        assert_eq!(r[2].count, 2);
    }

    #[test]
    fn duplicates_filtered() {
        let mut q = FetchQueue::new(8);
        assert_eq!(q.push(blk(1), 0), Enqueued::Added);
        assert_eq!(q.push(blk(1), 5), Enqueued::Duplicate);
        assert_eq!(q.len(), 1);
        q.pop();
        assert_eq!(q.push(blk(1), 9), Enqueued::Added);
    }

    #[test]
    fn overflow_drops_oldest() {
        let mut q = FetchQueue::new(3);
        let dropped = q.extend((0..5).map(blk), 0);
        assert_eq!(dropped, vec![blk(0), blk(1)]);
        assert_eq!(q.dropped(), 2);
        let rest: Vec<_> = q.pop_batch(10).into_iter().map(|x| x.block).collect();
        assert_eq!(rest, vec![blk(2), blk(3), blk(4)]);
        assert!(!q.contains(&blk(0)));
    }

    proptest! {
        #[test]
        fn fifo_order_and_dedup(ids in prop::collection::vec(0u32..40, 0..200), cap in 1usize..50) {
            let mut q = FetchQueue::new(cap);
            let mut model: VecDeque<u32> = VecDeque::new();
            for &i in &ids {
                q.push(blk(i), 0);
                if !model.contains(&i) {
                    if model.len() == cap {
                        model.pop_front();
                    }
                    model.push_back(i);
                }
            }
            let got: Vec<u32> = q.pop_batch(usize::MAX).into_iter().map(|x| x.block.index).collect();
            prop_assert_eq!(got, Vec::from(model));
        }

        #[test]
        fn coalesce_round_trips(ids in prop::collection::vec((0u32..3, 0u32..30), 0..60)) {
            let blocks: Vec<BlockId> = ids.iter().map(|&(f, i)| BlockId::new(f, i)).collect();
            let back: Vec<BlockId> = coalesce(&blocks).iter().flat_map(|r| r.blocks().collect::<Vec<_>>()).collect();
            prop_assert_eq!(back, blocks);
        }
    }
}
