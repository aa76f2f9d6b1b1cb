//! Block grouping: partitions, equivalent partitions and superblocks.
//!
//! Reads of one trace that follow each other within `delta` form a
//! partition. Near-identical partitions of the same trace (Jaccard index at
//! least `tau`) are merged into equivalent partitions. Superblocks are then
//! extracted greedily as the largest cross-trace intersections, scored by
//! `blocks x contributing traces`, until the best score drops below
//! `min_superblock_size`. Whatever is left is merged into the superblock
//! closest in time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{BlockId, BlockRead, Trace};

pub type BlockSet = BTreeSet<BlockId>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    pub delta_ms: u64,
    pub tau: f64,
    pub min_superblock_size: usize,
    /// Fraction of a superblock that must appear in a partition for the
    /// superblock to match it.
    pub containment: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        GroupingParams {
            delta_ms: 100,
            tau: 0.9,
            min_superblock_size: 17,
            containment: 0.9,
        }
    }
}

impl GroupingParams {
    pub fn validate(&self) -> Result<(), GroupingError> {
        if self.delta_ms == 0 {
            return Err(GroupingError::InvalidParams("delta_ms must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(GroupingError::InvalidParams(format!("tau {} not in (0, 1]", self.tau)));
        }
        if self.min_superblock_size == 0 {
            return Err(GroupingError::InvalidParams(
                "min_superblock_size must be at least 1".into(),
            ));
        }
        if !(self.containment > 0.0 && self.containment <= 1.0) {
            return Err(GroupingError::InvalidParams(format!(
                "containment {} not in (0, 1]",
                self.containment
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GroupingError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("trace {0:?} has no block reads")]
    EmptyTrace(String),
    #[error("duplicate trace id {0:?}")]
    DuplicateTrace(String),
    #[error("invalid grouping parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub blocks: BlockSet,
    pub first_ts: u64,
    pub last_ts: u64,
    /// The input reads that make up this partition.
    pub reads: Range<usize>,
}

/// Greedy left-to-right split: a gap of `delta_ms` or more starts a new
/// partition.
pub fn partition_reads(reads: &[BlockRead], delta_ms: u64) -> Vec<Partition> {
    let mut out: Vec<Partition> = Vec::new();
    for (i, r) in reads.iter().enumerate() {
        match out.last_mut() {
            Some(p) if r.timestamp_ms.saturating_sub(p.last_ts) < delta_ms => {
                p.blocks.insert(r.block);
                p.last_ts = r.timestamp_ms;
                p.reads.end = i + 1;
            }
            _ => out.push(Partition {
                blocks: BlockSet::from([r.block]),
                first_ts: r.timestamp_ms,
                last_ts: r.timestamp_ms,
                reads: i..i + 1,
            }),
        }
    }
    out
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets counting as identical.
pub fn jaccard(a: &BlockSet, b: &BlockSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = intersection_len(a, b);
    inter as f64 / (a.len() + b.len() - inter) as f64
}

fn intersection_len(a: &BlockSet, b: &BlockSet) -> usize {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if small.len() * 8 < large.len() {
        return small.iter().filter(|x| large.contains(x)).count();
    }
    let mut n = 0;
    let mut ia = small.iter().peekable();
    let mut ib = large.iter().peekable();
    while let (Some(x), Some(y)) = (ia.peek(), ib.peek()) {
        match x.cmp(y) {
            std::cmp::Ordering::Less => {
                ia.next();
            }
            std::cmp::Ordering::Greater => {
                ib.next();
            }
            std::cmp::Ordering::Equal => {
                n += 1;
                ia.next();
                ib.next();
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentPartition {
    pub blocks: BlockSet,
    /// First timestamp of every partition merged into this one, in order.
    pub occurrences: Vec<u64>,
}

impl EquivalentPartition {
    pub fn first_ts(&self) -> u64 {
        self.occurrences[0]
    }
}

/// Merges each partition (in time order) into the most similar existing
/// equivalent partition when the similarity reaches `tau`.
pub fn merge_equivalent(partitions: &[Partition], tau: f64) -> Vec<EquivalentPartition> {
    let mut out: Vec<EquivalentPartition> = Vec::new();
    for p in partitions {
        let mut best: Option<(usize, f64)> = None;
        for (j, e) in out.iter().enumerate() {
            let sim = jaccard(&p.blocks, &e.blocks);
            if sim > best.map_or(0.0, |b| b.1) {
                best = Some((j, sim));
            }
        }
        match best {
            Some((j, sim)) if sim >= tau => {
                let e = &mut out[j];
                e.blocks.extend(p.blocks.iter().copied());
                e.occurrences.push(p.first_ts);
            }
            _ => out.push(EquivalentPartition {
                blocks: p.blocks.clone(),
                occurrences: vec![p.first_ts],
            }),
        }
    }
    out
}

/// Result of the overlap search. `contributors` holds `(trace, partition)`
/// index pairs sorted by trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Overlap {
    pub blocks: BlockSet,
    pub contributors: Vec<(usize, usize)>,
}

impl Overlap {
    pub fn score(&self) -> usize {
        self.blocks.len() * self.contributors.len()
    }
}

/// Dense numbering of the blocks of a corpus, so sets become bitsets.
#[derive(Debug, Default)]
struct BlockIndex {
    ids: Vec<BlockId>,
    pos: HashMap<BlockId, usize>,
}

impl BlockIndex {
    fn build<'a>(sets: impl Iterator<Item = &'a BlockSet>) -> Self {
        let mut all = BTreeSet::new();
        for s in sets {
            all.extend(s.iter().copied());
        }
        let ids: Vec<BlockId> = all.into_iter().collect();
        let pos = ids.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        BlockIndex { ids, pos }
    }

    fn bitset(&self, set: &BlockSet) -> FixedBitSet {
        let mut bits = FixedBitSet::with_capacity(self.ids.len());
        for b in set {
            bits.insert(self.pos[b]);
        }
        bits
    }

    fn blocks(&self, bits: &FixedBitSet) -> BlockSet {
        bits.ones().map(|i| self.ids[i]).collect()
    }
}

struct Candidate {
    count: usize,
    contributors: Vec<(usize, usize)>,
    blocks: FixedBitSet,
}

impl Candidate {
    fn score(&self) -> usize {
        self.count * self.contributors.len()
    }
}

/// Exact branch-and-bound search for the largest overlap. Each trace
/// contributes at most one partition; traces may be skipped.
struct OverlapSearch<'a> {
    sets: &'a [Vec<FixedBitSet>],
    counts: Vec<Vec<usize>>,
    suffix_max: Vec<usize>,
    best: Option<Candidate>,
}

impl<'a> OverlapSearch<'a> {
    fn run(sets: &'a [Vec<FixedBitSet>]) -> Option<Candidate> {
        let counts: Vec<Vec<usize>> = sets
            .iter()
            .map(|t| t.iter().map(|s| s.count_ones(..)).collect())
            .collect();
        let mut suffix_max = vec![0; sets.len() + 1];
        for t in (0..sets.len()).rev() {
            let m = counts[t].iter().copied().max().unwrap_or(0);
            suffix_max[t] = suffix_max[t + 1].max(m);
        }
        let mut search = OverlapSearch {
            sets,
            counts,
            suffix_max,
            best: None,
        };
        search.visit(0, None, 0, &mut Vec::new());
        search.best
    }

    fn best_score(&self) -> usize {
        self.best.as_ref().map_or(0, Candidate::score)
    }

    fn offer(&mut self, blocks: &FixedBitSet, count: usize, chosen: &[(usize, usize)]) {
        let score = count * chosen.len();
        let better = match &self.best {
            None => score > 0,
            Some(b) => {
                let bs = b.score();
                score > bs
                    || (score == bs && chosen.len() > b.contributors.len())
                    || (score == bs
                        && chosen.len() == b.contributors.len()
                        && chosen < b.contributors.as_slice())
            }
        };
        if better {
            self.best = Some(Candidate {
                count,
                contributors: chosen.to_vec(),
                blocks: blocks.clone(),
            });
        }
    }

    fn visit(
        &mut self,
        t: usize,
        cur: Option<&FixedBitSet>,
        cur_count: usize,
        chosen: &mut Vec<(usize, usize)>,
    ) {
        let traces = self.sets.len();
        if t == traces {
            if let Some(c) = cur {
                self.offer(c, cur_count, chosen);
            }
            return;
        }
        let remaining = traces - t;
        let bound = match cur {
            Some(_) => cur_count * (chosen.len() + remaining),
            None => self.suffix_max[t] * remaining,
        };
        if bound == 0 || bound < self.best_score() {
            return;
        }

        let mut kids: Vec<(usize, usize, FixedBitSet)> = Vec::new();
        for (j, p) in self.sets[t].iter().enumerate() {
            if self.counts[t][j] == 0 {
                continue;
            }
            let (inter, n) = match cur {
                None => (p.clone(), self.counts[t][j]),
                Some(c) => {
                    let n = c.intersection_count(p);
                    if n == 0 {
                        continue;
                    }
                    (c & p, n)
                }
            };
            if n * (chosen.len() + remaining) < self.best_score() {
                continue;
            }
            kids.push((n, j, inter));
        }
        kids.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (n, j, inter) in kids {
            if n * (chosen.len() + remaining) < self.best_score() {
                continue;
            }
            chosen.push((t, j));
            self.visit(t + 1, Some(&inter), n, chosen);
            chosen.pop();
        }
        self.visit(t + 1, cur, cur_count, chosen);
    }
}

/// Largest `|blocks| x n` intersection choosing at most one equivalent
/// partition per trace. Ties prefer more contributors, then the
/// lexicographically lowest `(trace, partition)` list.
pub fn find_largest_overlap(equiv: &[Vec<EquivalentPartition>]) -> Overlap {
    let index = BlockIndex::build(equiv.iter().flatten().map(|e| &e.blocks));
    let sets: Vec<Vec<FixedBitSet>> = equiv
        .iter()
        .map(|t| t.iter().map(|e| index.bitset(&e.blocks)).collect())
        .collect();
    match OverlapSearch::run(&sets) {
        Some(c) => Overlap {
            blocks: index.blocks(&c.blocks),
            contributors: c.contributors,
        },
        None => Overlap {
            blocks: BlockSet::new(),
            contributors: Vec::new(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superblock {
    pub id: u32,
    pub blocks: BlockSet,
    /// Entry timestamps per contributing trace.
    pub timestamps: BTreeMap<String, Vec<u64>>,
    pub contributors: BTreeSet<String>,
    /// Blocks that joined through remainder merging rather than extraction.
    /// They are prefetched with the superblock but do not count towards
    /// matching.
    #[serde(default)]
    pub merged: BlockSet,
}

impl Superblock {
    /// Number of blocks that count towards matching.
    pub fn core_len(&self) -> usize {
        self.blocks.len() - self.merged.len()
    }
}

struct Draft {
    blocks: FixedBitSet,
    merged: FixedBitSet,
    timestamps: BTreeMap<usize, Vec<u64>>,
}

/// Runs the greedy extraction loop followed by remainder merging.
/// `equiv[t]` are the equivalent partitions of trace `trace_ids[t]`.
pub fn create_superblocks(
    equiv: &[Vec<EquivalentPartition>],
    trace_ids: &[String],
    min_superblock_size: usize,
) -> Vec<Superblock> {
    assert_eq!(equiv.len(), trace_ids.len());
    let index = BlockIndex::build(equiv.iter().flatten().map(|e| &e.blocks));
    let mut sets: Vec<Vec<FixedBitSet>> = equiv
        .iter()
        .map(|t| t.iter().map(|e| index.bitset(&e.blocks)).collect())
        .collect();

    let mut drafts: Vec<Draft> = Vec::new();
    while let Some(c) = OverlapSearch::run(&sets) {
        if c.score() < min_superblock_size {
            break;
        }
        let mut timestamps: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for &(t, j) in &c.contributors {
            sets[t][j].difference_with(&c.blocks);
            timestamps
                .entry(t)
                .or_default()
                .extend(equiv[t][j].occurrences.iter().copied());
        }
        drafts.push(Draft {
            merged: FixedBitSet::with_capacity(c.blocks.len()),
            blocks: c.blocks,
            timestamps,
        });
    }
    log::debug!("extracted {} superblocks", drafts.len());

    if drafts.is_empty() {
        for (t, parts) in sets.iter().enumerate() {
            for (j, bits) in parts.iter().enumerate() {
                if bits.count_ones(..) > 0 {
                    drafts.push(Draft {
                        blocks: bits.clone(),
                        merged: FixedBitSet::with_capacity(bits.len()),
                        timestamps: BTreeMap::from([(t, equiv[t][j].occurrences.clone())]),
                    });
                }
            }
        }
    } else {
        for (t, parts) in sets.iter().enumerate() {
            for (j, bits) in parts.iter().enumerate() {
                if bits.count_ones(..) == 0 {
                    continue;
                }
                let target = closest_in_time(&drafts, t, equiv[t][j].first_ts());
                let d = &mut drafts[target];
                let mut fresh = bits.clone();
                fresh.difference_with(&d.blocks);
                d.merged.union_with(&fresh);
                d.blocks.union_with(bits);
            }
        }
    }

    drafts
        .into_iter()
        .enumerate()
        .map(|(id, d)| {
            let timestamps: BTreeMap<String, Vec<u64>> = d
                .timestamps
                .into_iter()
                .map(|(t, mut ts)| {
                    ts.sort_unstable();
                    (trace_ids[t].clone(), ts)
                })
                .collect();
            Superblock {
                id: id as u32,
                blocks: index.blocks(&d.blocks),
                merged: index.blocks(&d.merged),
                contributors: timestamps.keys().cloned().collect(),
                timestamps,
            }
        })
        .collect()
}

fn closest_in_time(drafts: &[Draft], trace: usize, ts: u64) -> usize {
    let dist = |stamps: &[u64]| stamps.iter().map(|&s| s.abs_diff(ts)).min();
    let mut best: Option<(u64, usize)> = None;
    for (i, d) in drafts.iter().enumerate() {
        if let Some(dd) = d.timestamps.get(&trace).and_then(|s| dist(s)) {
            if best.is_none_or(|b| dd < b.0) {
                best = Some((dd, i));
            }
        }
    }
    if let Some((_, i)) = best {
        return i;
    }
    // No superblock carries a timestamp from this trace.
    for (i, d) in drafts.iter().enumerate() {
        let all: Vec<u64> = d.timestamps.values().flatten().copied().collect();
        if let Some(dd) = dist(&all) {
            if best.is_none_or(|b| dd < b.0) {
                best = Some((dd, i));
            }
        }
    }
    best.map_or(0, |b| b.1)
}

/// The trained superblocks plus a block → superblock lookup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperblockSet {
    pub superblocks: Vec<Superblock>,
    #[serde(skip)]
    by_block: HashMap<BlockId, Vec<u32>>,
}

impl PartialEq for SuperblockSet {
    fn eq(&self, other: &Self) -> bool {
        self.superblocks == other.superblocks
    }
}

impl SuperblockSet {
    pub fn new(superblocks: Vec<Superblock>) -> Self {
        let mut set = SuperblockSet {
            superblocks,
            by_block: HashMap::new(),
        };
        set.reindex();
        set
    }

    /// Rebuilds the block lookup, e.g. after deserialization.
    pub fn reindex(&mut self) {
        self.by_block.clear();
        for s in &self.superblocks {
            for b in &s.blocks {
                self.by_block.entry(*b).or_default().push(s.id);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.superblocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superblocks.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Superblock> {
        self.superblocks.get(id as usize)
    }

    pub fn containing(&self, block: &BlockId) -> &[u32] {
        self.by_block.get(block).map_or(&[], Vec::as_slice)
    }

    /// Superblocks contained in a partition (given as block → first read
    /// time) at the `containment` ratio, ordered by first touch then id.
    /// Only a superblock's extracted blocks count; see [`Superblock::merged`].
    pub fn match_partition(&self, first_touch: &BTreeMap<BlockId, u64>, containment: f64) -> Vec<(u32, u64)> {
        let mut hits: BTreeMap<u32, (usize, u64)> = BTreeMap::new();
        for (b, &ts) in first_touch {
            for &s in self.containing(b) {
                let sb = &self.superblocks[s as usize];
                let e = hits.entry(s).or_insert((0, u64::MAX));
                e.1 = e.1.min(ts);
                if sb.merged.is_empty() || !sb.merged.contains(b) {
                    e.0 += 1;
                }
            }
        }
        let mut out: Vec<(u32, u64)> = hits
            .into_iter()
            .filter(|(s, (n, _))| {
                let size = self.superblocks[*s as usize].core_len();
                size > 0 && *n as f64 >= containment * size as f64
            })
            .map(|(s, (_, ts))| (s, ts))
            .collect();
        out.sort_by_key(|&(s, ts)| (ts, s));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperblockSequence {
    pub trace_id: String,
    /// `(superblock id, entry timestamp)`, timestamps strictly increasing.
    pub steps: Vec<(u32, u64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub partitions: usize,
    pub matched: usize,
    pub unmatched: usize,
}

pub(crate) fn first_touch(reads: &[BlockRead]) -> BTreeMap<BlockId, u64> {
    let mut m = BTreeMap::new();
    for r in reads {
        m.entry(r.block).or_insert(r.timestamp_ms);
    }
    m
}

/// Maps a trace onto superblocks, one step per matched superblock.
pub fn to_superblock_sequence(
    trace_id: &str,
    reads: &[BlockRead],
    set: &SuperblockSet,
    delta_ms: u64,
    containment: f64,
) -> (SuperblockSequence, Coverage) {
    let mut steps: Vec<(u32, u64)> = Vec::new();
    let mut cov = Coverage::default();
    for p in partition_reads(reads, delta_ms) {
        cov.partitions += 1;
        let matches = set.match_partition(&first_touch(&reads[p.reads.clone()]), containment);
        if matches.is_empty() {
            cov.unmatched += 1;
            continue;
        }
        cov.matched += 1;
        for (s, ts) in matches {
            if steps.last().is_some_and(|l| l.0 == s) {
                continue;
            }
            let ts = match steps.last() {
                Some(&(_, prev)) if ts <= prev => prev + 1,
                _ => ts,
            };
            steps.push((s, ts));
        }
    }
    (
        SuperblockSequence {
            trace_id: trace_id.to_string(),
            steps,
        },
        cov,
    )
}

/// Output of the offline grouping pipeline.
#[derive(Debug, Clone)]
pub struct Grouping {
    pub superblocks: SuperblockSet,
    pub equivalent_partitions: usize,
    pub partitions: usize,
}

/// Partitions, merges and extracts superblocks for a training corpus.
pub fn build_superblocks(
    traces: &[Trace],
    params: &GroupingParams,
    block_size: u64,
) -> Result<Grouping, GroupingError> {
    params.validate()?;
    if traces.is_empty() {
        return Err(GroupingError::EmptyCorpus);
    }
    let mut seen = BTreeSet::new();
    for t in traces {
        if !seen.insert(t.id.as_str()) {
            return Err(GroupingError::DuplicateTrace(t.id.clone()));
        }
    }
    let mut equiv = Vec::with_capacity(traces.len());
    let mut partitions = 0;
    for t in traces {
        let reads = t.block_reads(block_size);
        if reads.is_empty() {
            return Err(GroupingError::EmptyTrace(t.id.clone()));
        }
        let parts = partition_reads(&reads, params.delta_ms);
        partitions += parts.len();
        equiv.push(merge_equivalent(&parts, params.tau));
    }
    let ids: Vec<String> = traces.iter().map(|t| t.id.clone()).collect();
    let superblocks = create_superblocks(&equiv, &ids, params.min_superblock_size);
    Ok(Grouping {
        superblocks: SuperblockSet::new(superblocks),
        equivalent_partitions: equiv.iter().map(Vec::len).sum(),
        partitions,
    })
}
