//! Local block storage.
//!
//! [`CachePolicy`] is the bookkeeping: which blocks are resident (never
//! evicted), which are temporary, which temporary blocks are pinned by a
//! prediction, and the LRU order of the rest. The simulator drives it
//! directly. [`BlockStore`] adds the container file and journal used by a
//! live client.
//!
//! Container: `blocks.dat`, an array of `block_size` slots.
//! Journal: `journal.log`, header `"SFJRNL01"` + `u32` block size, then
//! 21-byte records `{op u8, file u32, index u32, slot u64, crc32 u32}`
//! (little-endian; op 1 = temporary, 2 = resident, 3 = removed).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{BlockId, FileId, Trace};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("temporary storage exhausted: every block is pinned ({pinned} pinned, limit {limit} bytes)")]
    Exhausted { pinned: usize, limit: u64 },
    #[error("block data is {got} bytes, expected {expected}")]
    WrongSize { expected: usize, got: usize },
    #[error("container i/o: {0}")]
    Io(String),
    #[error("journal corrupt: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for CacheError {
    fn from(e: std::io::Error) -> Self {
        CacheError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Resident,
    Temporary,
    Miss,
}

impl Lookup {
    pub fn is_hit(self) -> bool {
        self != Lookup::Miss
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub resident_hits: u64,
    pub temp_hits: u64,
    pub misses: u64,
    pub miss_bytes: u64,
    pub inserts: u64,
    pub evictions: u64,
    pub unpinned: u64,
    pub occupancy_bytes: u64,
}

#[derive(Debug, Clone, Copy)]
enum Entry {
    Pinned { since_ms: u64, tick: u64 },
    Recent { tick: u64 },
}

#[derive(Debug, Clone)]
pub struct CachePolicy {
    block_size: u64,
    temp_limit: Option<u64>,
    resident: HashSet<BlockId>,
    temp: HashMap<BlockId, Entry>,
    lru: BTreeMap<u64, BlockId>,
    pins: BTreeMap<(u64, u64), BlockId>,
    tick: u64,
    stats: CacheStats,
}

impl CachePolicy {
    /// `temp_limit` of `None` means unlimited temporary storage.
    pub fn new(block_size: u64, temp_limit: Option<u64>) -> Self {
        CachePolicy {
            block_size,
            temp_limit,
            resident: HashSet::new(),
            temp: HashMap::new(),
            lru: BTreeMap::new(),
            pins: BTreeMap::new(),
            tick: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn temp_limit(&self) -> Option<u64> {
        self.temp_limit
    }

    fn capacity_blocks(&self) -> Option<usize> {
        self.temp_limit.map(|l| (l / self.block_size) as usize)
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn detach(&mut self, block: &BlockId) -> Option<Entry> {
        let e = self.temp.remove(block)?;
        match e {
            Entry::Pinned { since_ms, tick } => {
                self.pins.remove(&(since_ms, tick));
            }
            Entry::Recent { tick } => {
                self.lru.remove(&tick);
            }
        }
        Some(e)
    }

    pub fn add_resident(&mut self, block: BlockId) {
        self.detach(&block);
        self.resident.insert(block);
    }

    pub fn is_resident(&self, block: &BlockId) -> bool {
        self.resident.contains(block)
    }

    pub fn is_pinned(&self, block: &BlockId) -> bool {
        matches!(self.temp.get(block), Some(Entry::Pinned { .. }))
    }

    pub fn contains(&self, block: &BlockId) -> bool {
        self.resident.contains(block) || self.temp.contains_key(block)
    }

    /// A read. Hits refresh recency and release any prediction pin.
    pub fn lookup(&mut self, block: &BlockId) -> Lookup {
        if self.resident.contains(block) {
            self.stats.resident_hits += 1;
            return Lookup::Resident;
        }
        if self.temp.contains_key(block) {
            self.detach(block);
            let tick = self.next_tick();
            self.temp.insert(*block, Entry::Recent { tick });
            self.lru.insert(tick, *block);
            self.stats.temp_hits += 1;
            return Lookup::Temporary;
        }
        self.stats.misses += 1;
        self.stats.miss_bytes += self.block_size;
        Lookup::Miss
    }

    /// Stores a block, evicting least-recently-used unpinned temporary
    /// blocks as needed. Returns the evicted blocks.
    pub fn insert(&mut self, block: BlockId, pinned: bool, now_ms: u64) -> Result<Vec<BlockId>, CacheError> {
        if self.resident.contains(&block) {
            return Ok(Vec::new());
        }
        if let Some(e) = self.temp.get(&block).copied() {
            match (e, pinned) {
                (Entry::Recent { tick }, true) => {
                    self.lru.remove(&tick);
                    let tick = self.next_tick();
                    self.temp.insert(block, Entry::Pinned { since_ms: now_ms, tick });
                    self.pins.insert((now_ms, tick), block);
                }
                (Entry::Recent { tick }, false) => {
                    self.lru.remove(&tick);
                    let tick = self.next_tick();
                    self.temp.insert(block, Entry::Recent { tick });
                    self.lru.insert(tick, block);
                }
                (Entry::Pinned { .. }, _) => {}
            }
            return Ok(Vec::new());
        }

        let mut evicted = Vec::new();
        if let Some(cap) = self.capacity_blocks() {
            if self.pins.len() + 1 > cap {
                return Err(CacheError::Exhausted {
                    pinned: self.pins.len(),
                    limit: self.temp_limit.unwrap_or(0),
                });
            }
            while self.temp.len() + 1 > cap {
                let (&tick, &victim) = self.lru.iter().next().expect("unpinned block available");
                self.lru.remove(&tick);
                self.temp.remove(&victim);
                self.stats.evictions += 1;
                evicted.push(victim);
            }
        }
        let tick = self.next_tick();
        if pinned {
            self.temp.insert(block, Entry::Pinned { since_ms: now_ms, tick });
            self.pins.insert((now_ms, tick), block);
        } else {
            self.temp.insert(block, Entry::Recent { tick });
            self.lru.insert(tick, block);
        }
        self.stats.inserts += 1;
        Ok(evicted)
    }

    /// Drops a temporary block without counting an eviction.
    pub fn remove(&mut self, block: &BlockId) -> bool {
        self.detach(block).is_some()
    }

    /// Releases pins older than `age_ms` whose blocks were never read. They
    /// rejoin the LRU order at their original insertion recency.
    pub fn unpin_stale(&mut self, now_ms: u64, age_ms: u64) -> usize {
        let mut n = 0;
        while let Some((&(since, tick), &block)) = self.pins.iter().next() {
            if now_ms.saturating_sub(since) <= age_ms {
                break;
            }
            self.pins.remove(&(since, tick));
            self.temp.insert(block, Entry::Recent { tick });
            self.lru.insert(tick, block);
            n += 1;
        }
        self.stats.unpinned += n as u64;
        n
    }

    pub fn temp_blocks(&self) -> usize {
        self.temp.len()
    }

    pub fn pinned_blocks(&self) -> usize {
        self.pins.len()
    }

    pub fn resident_blocks(&self) -> usize {
        self.resident.len()
    }

    pub fn temp_occupancy_bytes(&self) -> u64 {
        self.temp.len() as u64 * self.block_size
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            occupancy_bytes: self.temp_occupancy_bytes(),
            ..self.stats
        }
    }

    /// Evictable blocks from least to most recently used.
    pub fn lru_order(&self) -> Vec<BlockId> {
        self.lru.values().copied().collect()
    }
}

/// Outcome of a [`BlockStore`] read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadOutcome {
    Hit { data: Vec<u8>, resident: bool },
    Miss,
}

const JOURNAL_MAGIC: &[u8; 8] = b"SFJRNL01";
const RECORD_LEN: usize = 21;
const OP_TEMP: u8 = 1;
const OP_RESIDENT: u8 = 2;
const OP_REMOVE: u8 = 3;

fn encode_record(op: u8, block: BlockId, slot: u64) -> [u8; RECORD_LEN] {
    let mut r = [0u8; RECORD_LEN];
    r[0] = op;
    r[1..5].copy_from_slice(&block.file.0.to_le_bytes());
    r[5..9].copy_from_slice(&block.index.to_le_bytes());
    r[9..17].copy_from_slice(&slot.to_le_bytes());
    let crc = crc32fast::hash(&r[..17]);
    r[17..].copy_from_slice(&crc.to_le_bytes());
    r
}

fn decode_record(r: &[u8]) -> Option<(u8, BlockId, u64)> {
    let crc = u32::from_le_bytes(r[17..21].try_into().ok()?);
    if crc32fast::hash(&r[..17]) != crc {
        return None;
    }
    let op = r[0];
    if !(OP_TEMP..=OP_REMOVE).contains(&op) {
        return None;
    }
    let file = u32::from_le_bytes(r[1..5].try_into().ok()?);
    let index = u32::from_le_bytes(r[5..9].try_into().ok()?);
    let slot = u64::from_le_bytes(r[9..17].try_into().ok()?);
    Some((op, BlockId { file: FileId(file), index }, slot))
}

/// Container-file block cache with a slot journal.
#[derive(Debug)]
pub struct BlockStore {
    dir: PathBuf,
    policy: CachePolicy,
    container: File,
    journal: File,
    slots: HashMap<BlockId, u64>,
    free: Vec<u64>,
    next_slot: u64,
}

impl BlockStore {
    /// Opens (or creates) a store in `dir`, rebuilding the index from the
    /// journal. A torn final record is discarded.
    pub fn open(dir: &Path, block_size: u64, temp_limit: Option<u64>) -> Result<BlockStore, CacheError> {
        std::fs::create_dir_all(dir)?;
        let container = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(dir.join("blocks.dat"))?;
        let mut journal = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(dir.join("journal.log"))?;

        let mut policy = CachePolicy::new(block_size, temp_limit);
        let mut slots = HashMap::new();
        let mut raw = Vec::new();
        journal.read_to_end(&mut raw)?;
        let header_len = JOURNAL_MAGIC.len() + 4;
        if raw.is_empty() {
            journal.write_all(JOURNAL_MAGIC)?;
            journal.write_all(&(block_size as u32).to_le_bytes())?;
            journal.sync_data()?;
        } else {
            if raw.len() < header_len || &raw[..8] != JOURNAL_MAGIC {
                return Err(CacheError::Corrupt("bad journal header".into()));
            }
            let bs = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes")) as u64;
            if bs != block_size {
                return Err(CacheError::Corrupt(format!(
                    "journal block size {bs}, store opened with {block_size}"
                )));
            }
            let mut good = header_len;
            for rec in raw[header_len..].chunks(RECORD_LEN) {
                if rec.len() < RECORD_LEN {
                    break;
                }
                let Some((op, block, slot)) = decode_record(rec) else { break };
                match op {
                    OP_TEMP => {
                        slots.insert(block, slot);
                        // Pins are not persisted.
                        policy.insert(block, false, 0).ok();
                    }
                    OP_RESIDENT => {
                        slots.insert(block, slot);
                        policy.add_resident(block);
                    }
                    _ => {
                        slots.remove(&block);
                        policy.remove(&block);
                    }
                }
                good += RECORD_LEN;
            }
            if good < raw.len() {
                log::warn!("journal: discarding {} trailing bytes", raw.len() - good);
                journal.set_len(good as u64)?;
            }
            journal.seek(SeekFrom::End(0))?;
        }

        let used: HashSet<u64> = slots.values().copied().collect();
        let next_slot = used.iter().max().map_or(0, |m| m + 1);
        let free = (0..next_slot).rev().filter(|s| !used.contains(s)).collect();
        // Reconcile the policy with slots that survived replay.
        Ok(BlockStore {
            dir: dir.to_path_buf(),
            policy,
            container,
            journal,
            slots,
            free,
            next_slot,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn policy(&self) -> &CachePolicy {
        &self.policy
    }

    pub fn stats(&self) -> CacheStats {
        self.policy.stats()
    }

    pub fn contains(&self, block: &BlockId) -> bool {
        self.policy.contains(block)
    }

    fn check_len(&self, data: &[u8]) -> Result<(), CacheError> {
        if data.len() as u64 != self.policy.block_size {
            return Err(CacheError::WrongSize {
                expected: self.policy.block_size as usize,
                got: data.len(),
            });
        }
        Ok(())
    }

    fn append(&mut self, op: u8, block: BlockId, slot: u64) -> Result<(), CacheError> {
        self.journal.write_all(&encode_record(op, block, slot))?;
        Ok(())
    }

    fn take_slot(&mut self) -> u64 {
        self.free.pop().unwrap_or_else(|| {
            let s = self.next_slot;
            self.next_slot += 1;
            s
        })
    }

    fn write_slot(&mut self, block: BlockId, data: &[u8], op: u8) -> Result<(), CacheError> {
        let slot = match self.slots.get(&block) {
            Some(&s) => s,
            None => self.take_slot(),
        };
        self.container
            .write_all_at(data, slot * self.policy.block_size)?;
        self.append(op, block, slot)?;
        self.slots.insert(block, slot);
        Ok(())
    }

    pub fn read(&mut self, block: &BlockId) -> Result<ReadOutcome, CacheError> {
        let outcome = self.policy.lookup(block);
        if outcome == Lookup::Miss {
            return Ok(ReadOutcome::Miss);
        }
        let slot = *self
            .slots
            .get(block)
            .ok_or_else(|| CacheError::Corrupt(format!("{block} has no slot")))?;
        let mut data = vec![0u8; self.policy.block_size as usize];
        self.container
            .read_exact_at(&mut data, slot * self.policy.block_size)?;
        Ok(ReadOutcome::Hit {
            data,
            resident: outcome == Lookup::Resident,
        })
    }

    pub fn install_resident(&mut self, block: BlockId, data: &[u8]) -> Result<(), CacheError> {
        self.check_len(data)?;
        self.write_slot(block, data, OP_RESIDENT)?;
        self.policy.add_resident(block);
        Ok(())
    }

    pub fn insert(&mut self, block: BlockId, data: &[u8], pinned: bool, now_ms: u64) -> Result<Vec<BlockId>, CacheError> {
        self.check_len(data)?;
        if self.policy.is_resident(&block) {
            return Ok(Vec::new());
        }
        let fresh = !self.policy.contains(&block);
        let evicted = self.policy.insert(block, pinned, now_ms)?;
        for v in &evicted {
            if let Some(slot) = self.slots.get(v).copied() {
                self.append(OP_REMOVE, *v, slot)?;
                self.slots.remove(v);
                self.free.push(slot);
            }
        }
        if fresh {
            self.write_slot(block, data, OP_TEMP)?;
        }
        Ok(evicted)
    }

    pub fn unpin_stale(&mut self, now_ms: u64, age_ms: u64) -> usize {
        self.policy.unpin_stale(now_ms, age_ms)
    }

    pub fn sync(&mut self) -> Result<(), CacheError> {
        self.container.sync_data()?;
        self.journal.sync_data()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidentSetSpec {
    pub b_initial: u64,
    pub selection: Vec<BlockId>,
}

/// Reads in the first two seconds of a run are launch reads.
pub const LAUNCH_WINDOW_MS: u64 = 2_000;

/// Orders blocks for the resident set: launch-window blocks first (earliest
/// access first), then everything else by median first-access time across
/// traces, with traces that never read a block counting as "never".
pub fn resident_ranking(traces: &[Trace], block_size: u64) -> Vec<BlockId> {
    let mut first_access: HashMap<BlockId, Vec<u64>> = HashMap::new();
    for (ti, t) in traces.iter().enumerate() {
        let start = t.records.first().map_or(0, |r| r.timestamp_ms);
        for r in t.block_reads(block_size) {
            let v = first_access
                .entry(r.block)
                .or_insert_with(|| vec![u64::MAX; traces.len()]);
            let rel = r.timestamp_ms - start;
            if v[ti] == u64::MAX {
                v[ti] = rel;
            }
        }
    }
    let mut launch: Vec<(u64, BlockId)> = Vec::new();
    let mut rest: Vec<(u64, u64, BlockId)> = Vec::new();
    for (b, mut times) in first_access {
        let earliest = *times.iter().min().expect("at least one trace");
        if earliest <= LAUNCH_WINDOW_MS {
            launch.push((earliest, b));
        } else {
            times.sort_unstable();
            let median = times[(times.len() - 1) / 2];
            rest.push((median, earliest, b));
        }
    }
    launch.sort_unstable();
    rest.sort_unstable();
    launch
        .into_iter()
        .map(|x| x.1)
        .chain(rest.into_iter().map(|x| x.2))
        .collect()
}

/// Takes the longest prefix of `ranking` that fits in `b_initial` bytes.
pub fn resident_prefix(ranking: &[BlockId], b_initial: u64, block_size: u64) -> ResidentSetSpec {
    let n = ((b_initial / block_size) as usize).min(ranking.len());
    ResidentSetSpec {
        b_initial,
        selection: ranking[..n].to_vec(),
    }
}

pub fn choose_resident_set(traces: &[Trace], b_initial: u64, block_size: u64) -> ResidentSetSpec {
    resident_prefix(&resident_ranking(traces, block_size), b_initial, block_size)
}

/// Permanent footprint: the application package plus the resident set.
pub fn permanent_footprint(package_bytes: f64, b_initial_bytes: f64) -> f64 {
    package_bytes + b_initial_bytes
}

/// Fraction of storage saved against keeping everything on the device.
pub fn storage_saving(permanent_bytes: f64, total_bytes: f64) -> f64 {
    1.0 - permanent_bytes / total_bytes
}
