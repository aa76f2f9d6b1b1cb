//! Trace-driven replay of a held-out run against a trained model.
//!
//! Time model, all in milliseconds:
//! - Application time is trace time plus the stall accumulated so far.
//!   Only misses stall.
//! - A miss sends one urgent request for the record's missing blocks. Its
//!   payload starts after one round trip, or after the speculative block
//!   already on the wire, whichever is later. Each block then takes
//!   `block_size * 8 / bandwidth`.
//! - Speculative downloads use one outstanding batch. A batch starts one
//!   round trip after it is sent, and its blocks arrive back to back.
//!   Remaining speculative blocks wait while an urgent request is pending.
//! - The predictor sees trace timestamps, so stalls do not split bursts.

mod pairs;
mod sweep;

pub use pairs::{train_pair_model, PairModel, PAIR_ENTRY_BYTES};
pub use sweep::{sweep, write_csv, SweepParam, SweepRow, CSV_HEADER};

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{AppModel, BundleError};
use crate::cache::{resident_prefix, CacheError, CachePolicy, Lookup};
use crate::predictor::{InFlight, Predictor, PredictorConfig, PredictorStats};
use crate::queue::{FetchQueue, DEFAULT_QUEUE_CAPACITY};
use crate::trace::{expand_record, BlockId, BlockRead, FileEntry, Trace};

/// The resident budget used in the paper's experiments (122 MB).
pub const PAPER_B_INITIAL: u64 = 122 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub bandwidth_bps: f64,
    pub rtt_ms: f64,
    pub predictor: PredictorConfig,
    pub b_initial_bytes: u64,
    /// `None` is unlimited.
    pub temp_limit_bytes: Option<u64>,
    pub min_superblock_size: usize,
    pub fp_window_ms: u64,
    pub spec_batch_blocks: usize,
    pub queue_capacity: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            bandwidth_bps: 17.4e6,
            rtt_ms: 100.0,
            predictor: PredictorConfig::default(),
            b_initial_bytes: PAPER_B_INITIAL,
            temp_limit_bytes: None,
            min_superblock_size: 17,
            fp_window_ms: 480_000,
            spec_batch_blocks: 256,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.bandwidth_bps > 0.0) {
            return Err(SimError::Config(format!("bandwidth {} bps", self.bandwidth_bps)));
        }
        if !(self.rtt_ms >= 0.0) || !self.rtt_ms.is_finite() {
            return Err(SimError::Config(format!("rtt {} ms", self.rtt_ms)));
        }
        if self.fp_window_ms == 0 {
            return Err(SimError::Config("fp_window must be positive".into()));
        }
        if self.spec_batch_blocks == 0 || self.queue_capacity == 0 {
            return Err(SimError::Config("batch size and queue capacity must be positive".into()));
        }
        self.predictor
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))
    }

    /// Transfer time of one block on the link.
    pub fn transfer_ms(&self, block_size: u64) -> f64 {
        block_size as f64 * 8.0 / self.bandwidth_bps * 1000.0
    }

    /// Latency of an urgent single-block fetch on an idle link.
    pub fn urgent_block_ms(&self, block_size: u64) -> f64 {
        self.rtt_ms + self.transfer_ms(block_size)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("trace {trace}: {message}")]
    Manifest { trace: String, message: String },
    #[error(transparent)]
    Train(#[from] BundleError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub trace_id: String,
    pub total_delay_ms: f64,
    pub stalls: u64,
    pub accesses: u64,
    pub resident_hits: u64,
    pub temp_hits: u64,
    pub misses: u64,
    pub miss_bytes: u64,
    pub hit_rate: f64,
    pub false_positive_bytes: u64,
    pub downloaded_bytes: u64,
    pub speculative_bytes: u64,
    pub urgent_bytes: u64,
    pub run_length_ms: f64,
    pub blocks_predicted: u64,
    pub queue_dropped: u64,
    pub discarded_downloads: u64,
    pub evictions: u64,
    pub predictor: PredictorStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_delay_ms: f64,
    pub miss_bytes: u64,
    pub hit_rate: f64,
    pub false_positive_bytes: u64,
    pub downloaded_bytes: u64,
    pub run_length_ms: f64,
    pub runs: Vec<RunReport>,
}

impl SimReport {
    pub fn aggregate(runs: Vec<RunReport>) -> SimReport {
        let accesses: u64 = runs.iter().map(|r| r.accesses).sum();
        let hits: u64 = runs.iter().map(|r| r.resident_hits + r.temp_hits).sum();
        SimReport {
            total_delay_ms: runs.iter().map(|r| r.total_delay_ms).sum(),
            miss_bytes: runs.iter().map(|r| r.miss_bytes).sum(),
            hit_rate: if accesses == 0 { 1.0 } else { hits as f64 / accesses as f64 },
            false_positive_bytes: runs.iter().map(|r| r.false_positive_bytes).sum(),
            downloaded_bytes: runs.iter().map(|r| r.downloaded_bytes).sum(),
            run_length_ms: runs.iter().map(|r| r.run_length_ms).sum(),
            runs,
        }
    }
}

#[derive(Clone, Copy)]
pub enum SimModel<'a> {
    Markov(&'a AppModel),
    Pairs(&'a PairModel),
}

impl SimModel<'_> {
    pub fn block_size(&self) -> u64 {
        match self {
            SimModel::Markov(m) => m.block_size,
            SimModel::Pairs(m) => m.block_size,
        }
    }

    pub fn files(&self) -> &[FileEntry] {
        match self {
            SimModel::Markov(m) => &m.files,
            SimModel::Pairs(m) => &m.files,
        }
    }

    pub fn resident_ranking(&self) -> &[BlockId] {
        match self {
            SimModel::Markov(m) => &m.resident_ranking,
            SimModel::Pairs(m) => &m.resident_ranking,
        }
    }
}

/// Checks that `trace` refers to the model's files with the same sizes.
pub fn check_manifest(files: &[FileEntry], trace: &Trace) -> Result<(), SimError> {
    let err = |message: String| SimError::Manifest {
        trace: trace.id.clone(),
        message,
    };
    for (fid, &size) in &trace.manifest {
        let entry = files
            .get(fid.0 as usize)
            .ok_or_else(|| err(format!("file {fid} is not in the model")))?;
        if let Some(known) = entry.size {
            if known != size {
                return Err(err(format!(
                    "{} is {size} bytes in the trace but {known} in the model",
                    entry.path
                )));
            }
        }
    }
    if let Some(r) = trace.records.iter().find(|r| r.file.0 as usize >= files.len()) {
        return Err(err(format!("file {} is not in the model", r.file)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct FpEntry {
    predicted_ms: f64,
    read: bool,
    downloaded: bool,
}

/// The speculative side of the link.
#[derive(Debug, Default)]
struct SpecLink {
    batch: VecDeque<BlockId>,
    /// Start of the next block of `batch`.
    next_start: f64,
    /// When the link last became free of speculative work.
    free_at: f64,
}

enum Source<'a> {
    Markov(Predictor<'a>),
    Pairs(&'a PairModel, InFlight),
}

struct Replay<'a> {
    cfg: &'a SimConfig,
    block_size: u64,
    transfer_ms: f64,
    cache: CachePolicy,
    queue: FetchQueue,
    in_flight: InFlight,
    link: SpecLink,
    fp: HashMap<BlockId, FpEntry>,
    report: RunReport,
}

impl Replay<'_> {
    fn enqueue(&mut self, blocks: &[BlockId], now: f64) {
        if blocks.is_empty() {
            return;
        }
        self.report.blocks_predicted += blocks.len() as u64;
        let bs = self.block_size;
        for b in blocks {
            let entry = FpEntry {
                predicted_ms: now,
                read: false,
                downloaded: false,
            };
            if let Some(old) = self.fp.insert(*b, entry) {
                if old.downloaded && !old.read {
                    self.report.false_positive_bytes += bs;
                }
            }
        }
        if self.link.batch.is_empty() && self.queue.is_empty() {
            self.link.free_at = self.link.free_at.max(now);
        }
        for dropped in self.queue.extend(blocks.iter().copied(), now as u64) {
            self.in_flight.remove(&dropped);
            self.report.queue_dropped += 1;
        }
    }

    fn complete(&mut self, b: BlockId, at: f64) {
        self.report.speculative_bytes += self.block_size;
        self.in_flight.remove(&b);
        if let Some(e) = self.fp.get_mut(&b) {
            e.downloaded = true;
        }
        if self.cache.contains(&b) {
            return;
        }
        match self.cache.insert(b, true, at as u64) {
            Ok(_) => {}
            Err(CacheError::Exhausted { .. }) => self.report.discarded_downloads += 1,
            Err(e) => unreachable!("policy-only cache: {e}"),
        }
    }

    /// Runs speculative transfers that finish by `t`.
    fn advance(&mut self, t: f64) {
        loop {
            if self.link.batch.is_empty() {
                if self.queue.is_empty() {
                    return;
                }
                for q in self.queue.pop_batch(self.cfg.spec_batch_blocks) {
                    if self.cache.contains(&q.block) {
                        self.in_flight.remove(&q.block);
                    } else {
                        self.link.batch.push_back(q.block);
                    }
                }
                if self.link.batch.is_empty() {
                    continue;
                }
                self.link.next_start = self.link.free_at + self.cfg.rtt_ms;
            }
            let end = self.link.next_start + self.transfer_ms;
            if end > t {
                return;
            }
            let b = self.link.batch.pop_front().expect("non-empty batch");
            self.complete(b, end);
            self.link.next_start = end;
            if self.link.batch.is_empty() {
                self.link.free_at = end;
            }
        }
    }

    /// Fetches `misses` urgently at `u`; returns the stall.
    fn urgent(&mut self, misses: &[BlockId], u: f64) -> f64 {
        let mut start = u + self.cfg.rtt_ms;
        if !self.link.batch.is_empty() && self.link.next_start <= u {
            // A speculative block is on the wire; it finishes first.
            let end = self.link.next_start + self.transfer_ms;
            start = start.max(end);
            let b = self.link.batch.pop_front().expect("non-empty batch");
            self.complete(b, end);
            self.link.next_start = end;
            if self.link.batch.is_empty() {
                self.link.free_at = end;
            }
        }
        let done = start + misses.len() as f64 * self.transfer_ms;
        if self.link.batch.is_empty() {
            self.link.free_at = self.link.free_at.max(done);
        } else {
            self.link.next_start = self.link.next_start.max(done);
        }
        self.report.urgent_bytes += misses.len() as u64 * self.block_size;
        for b in misses {
            // A full cache of pinned blocks still serves the read.
            let _ = self.cache.insert(*b, false, done as u64);
        }
        done - u
    }
}

/// Replays one trace.
pub fn simulate_trace(model: SimModel<'_>, trace: &Trace, cfg: &SimConfig) -> Result<RunReport, SimError> {
    cfg.validate()?;
    check_manifest(model.files(), trace)?;
    let block_size = model.block_size();
    let mut cache = CachePolicy::new(block_size, cfg.temp_limit_bytes);
    for b in resident_prefix(model.resident_ranking(), cfg.b_initial_bytes, block_size).selection {
        cache.add_resident(b);
    }
    let mut source = match model {
        SimModel::Markov(m) => Source::Markov(Predictor::new(&m.superblocks, &m.ctmc, cfg.predictor)),
        SimModel::Pairs(p) => Source::Pairs(p, InFlight::default()),
    };
    let in_flight = match &source {
        Source::Markov(p) => p.in_flight(),
        Source::Pairs(_, f) => f.clone(),
    };
    let mut r = Replay {
        cfg,
        block_size,
        transfer_ms: cfg.transfer_ms(block_size),
        cache,
        queue: FetchQueue::new(cfg.queue_capacity),
        in_flight,
        link: SpecLink::default(),
        fp: HashMap::new(),
        report: RunReport {
            trace_id: trace.id.clone(),
            ..Default::default()
        },
    };

    let mut stall = 0.0;
    let mut misses = Vec::new();
    for rec in &trace.records {
        let t = rec.timestamp_ms as f64 + stall;
        r.advance(t);
        r.cache.unpin_stale(t as u64, cfg.fp_window_ms);
        let reads = expand_record(rec, block_size);

        for br in &reads {
            let wanted: Vec<BlockId> = match &mut source {
                Source::Markov(p) => {
                    let cache = &r.cache;
                    p.observe(*br, |b| cache.contains(b))
                        .map(|req| req.blocks)
                        .unwrap_or_default()
                }
                Source::Pairs(pm, flight) => pm
                    .predict_pairs(&br.block)
                    .into_iter()
                    .filter(|b| !r.cache.contains(b) && flight.insert(*b))
                    .collect(),
            };
            r.enqueue(&wanted, t);
        }
        r.advance(t);

        misses.clear();
        for BlockRead { block, .. } in &reads {
            r.report.accesses += 1;
            if let Some(e) = r.fp.get_mut(block) {
                if !e.read && t - e.predicted_ms <= cfg.fp_window_ms as f64 {
                    e.read = true;
                }
            }
            match r.cache.lookup(block) {
                Lookup::Resident => r.report.resident_hits += 1,
                Lookup::Temporary => r.report.temp_hits += 1,
                Lookup::Miss => misses.push(*block),
            }
        }
        if !misses.is_empty() {
            let s = r.urgent(&misses, t);
            stall += s;
            r.report.stalls += 1;
        }
    }

    let mut rep = r.report;
    let bs = block_size;
    rep.false_positive_bytes += r.fp.values().filter(|e| e.downloaded && !e.read).count() as u64 * bs;
    rep.misses = rep.accesses - rep.resident_hits - rep.temp_hits;
    rep.miss_bytes = rep.misses * bs;
    rep.downloaded_bytes = rep.speculative_bytes + rep.urgent_bytes;
    rep.hit_rate = if rep.accesses == 0 {
        1.0
    } else {
        (rep.resident_hits + rep.temp_hits) as f64 / rep.accesses as f64
    };
    rep.total_delay_ms = stall;
    rep.run_length_ms = trace.duration_ms() as f64 + stall;
    rep.evictions = r.cache.stats().evictions;
    rep.queue_dropped = r.queue.dropped();
    if let Source::Markov(p) = &source {
        rep.predictor = p.stats();
    }
    Ok(rep)
}

/// Replays each trace independently (in parallel) and aggregates.
pub fn simulate(model: SimModel<'_>, traces: &[Trace], cfg: &SimConfig) -> Result<SimReport, SimError> {
    let runs = traces
        .par_iter()
        .map(|t| simulate_trace(model, t, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimReport::aggregate(runs))
}
