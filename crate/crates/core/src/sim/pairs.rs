//! Block-pair lookup baseline: remembers every (Bi, Bj) with Bj read
//! within the lookahead after Bi and predicts all Bj on a read of Bi.

use std::collections::{BTreeSet, HashMap};

use fixedbitset::FixedBitSet;

use crate::cache::resident_ranking;
use crate::trace::{BlockId, FileEntry, FileTable, Trace};

/// Bytes per stored pair: two 32-bit block ids.
pub const PAIR_ENTRY_BYTES: u64 = 8;

#[derive(Debug, Clone)]
pub struct PairModel {
    pub block_size: u64,
    pub lookahead_ms: u64,
    pub files: Vec<FileEntry>,
    pub resident_ranking: Vec<BlockId>,
    blocks: Vec<BlockId>,
    dense: HashMap<BlockId, usize>,
    rows: Vec<FixedBitSet>,
    pairs: u64,
}

pub fn train_pair_model(traces: &[Trace], table: &FileTable, lookahead_ms: u64, block_size: u64) -> PairModel {
    let reads: Vec<Vec<_>> = traces.iter().map(|t| t.block_reads(block_size)).collect();
    let distinct: BTreeSet<BlockId> = reads.iter().flatten().map(|r| r.block).collect();
    let blocks: Vec<BlockId> = distinct.into_iter().collect();
    let dense: HashMap<BlockId, usize> = blocks.iter().enumerate().map(|(i, b)| (*b, i)).collect();
    let n = blocks.len();
    let mut rows = vec![FixedBitSet::with_capacity(n); n];
    for trace in &reads {
        let ids: Vec<usize> = trace.iter().map(|r| dense[&r.block]).collect();
        let mut end = 0;
        for (i, r) in trace.iter().enumerate() {
            end = end.max(i + 1);
            while end < trace.len() && trace[end].timestamp_ms - r.timestamp_ms <= lookahead_ms {
                end += 1;
            }
            let row = &mut rows[ids[i]];
            for &j in &ids[i + 1..end] {
                if j != ids[i] {
                    row.insert(j);
                }
            }
        }
    }
    let pairs = rows.iter().map(|r| r.count_ones(..) as u64).sum();
    PairModel {
        block_size,
        lookahead_ms,
        files: table.entries().to_vec(),
        resident_ranking: resident_ranking(traces, block_size),
        blocks,
        dense,
        rows,
        pairs,
    }
}

impl PairModel {
    pub fn pair_count(&self) -> u64 {
        self.pairs
    }

    pub fn memory_bytes(&self) -> u64 {
        self.pairs * PAIR_ENTRY_BYTES
    }

    pub fn distinct_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Every block paired with `block`, in block order.
    pub fn predict_pairs(&self, block: &BlockId) -> Vec<BlockId> {
        self.dense.get(block).map_or_else(Vec::new, |&i| {
            self.rows[i].ones().map(|j| self.blocks[j]).collect()
        })
    }

    pub fn contains_pair(&self, from: &BlockId, to: &BlockId) -> bool {
        match (self.dense.get(from), self.dense.get(to)) {
            (Some(&i), Some(&j)) => self.rows[i].contains(j),
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{FileId, ReadRecord};

    fn trace(reads: &[(u64, u32)]) -> Trace {
        Trace::new(
            "t",
            reads
                .iter()
                .map(|&(ts, b)| ReadRecord {
                    timestamp_ms: ts,
                    file: FileId(0),
                    offset: b as u64 * 4096,
                    length: 4096,
                })
                .collect(),
        )
    }

    fn b(i: u32) -> BlockId {
        BlockId::new(0, i)
    }

    #[test]
    fn pair_within_lookahead() {
        let m = train_pair_model(&[trace(&[(0, 1), (10_000, 2)])], &FileTable::new(), 30_000, 4096);
        assert_eq!(m.pair_count(), 1);
        assert_eq!(m.predict_pairs(&b(1)), vec![b(2)]);
        assert!(m.predict_pairs(&b(2)).is_empty());
        assert_eq!(m.memory_bytes(), 8);
    }

    #[test]
    fn gap_beyond_lookahead() {
        let m = train_pair_model(&[trace(&[(0, 1), (40_000, 2)])], &FileTable::new(), 30_000, 4096);
        assert_eq!(m.pair_count(), 0);
    }

    #[test]
    fn all_ordered_pairs() {
        let n = 9u32;
        let forward: Vec<(u64, u32)> = (0..n).map(|i| (i as u64, i)).collect();
        let m = train_pair_model(&[trace(&forward)], &FileTable::new(), 30_000, 4096);
        assert_eq!(m.pair_count(), (n * (n - 1) / 2) as u64);
        // Reading them all again within the window yields both directions.
        let twice: Vec<(u64, u32)> = (0..2 * n).map(|i| (i as u64, i % n)).collect();
        let m = train_pair_model(&[trace(&twice)], &FileTable::new(), 30_000, 4096);
        assert_eq!(m.pair_count(), (n * (n - 1)) as u64);
    }

    #[test]
    fn matches_quadratic_oracle() {
        let reads: Vec<(u64, u32)> = (0..200u64).map(|i| (i * 137 % 5000 + i * 50, (i * 7 % 23) as u32)).collect();
        let mut sorted = reads.clone();
        sorted.sort();
        let t = trace(&sorted);
        let m = train_pair_model(std::slice::from_ref(&t), &FileTable::new(), 700, 4096);
        let mut want = BTreeSet::new();
        for (i, a) in sorted.iter().enumerate() {
            for c in &sorted[i + 1..] {
                if c.0 - a.0 <= 700 && c.1 != a.1 {
                    want.insert((a.1, c.1));
                }
            }
        }
        assert_eq!(m.pair_count(), want.len() as u64);
        for (x, y) in want {
            assert!(m.contains_pair(&b(x), &b(y)));
        }
    }
}
