//! Replays a trace in real time against a block server, driving the
//! predictor, the on-disk cache and both fetch paths. Reports the same
//! metrics as the simulator.
//!
//! With `time_scale` k the trace plays k times faster. The server's link
//! must then be scaled the same way (see [`LinkConfig::scaled`]); stalls are
//! measured on the wall clock and multiplied back by k.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use streamfetch_core::cache::{resident_prefix, BlockStore, CacheError, ReadOutcome};
use streamfetch_core::predictor::{InFlight, Predictor};
use streamfetch_core::sim::{check_manifest, PairModel, RunReport, SimConfig, SimError, SimModel};
use streamfetch_core::trace::{expand_record, BlockId, Trace};
use thiserror::Error;

use crate::client::{ClientConfig, FetchError, SpecFetcher, SpecQueue, SpecSink, SpecStats, UrgentClient, UrgentStats};
use crate::link::LinkConfig;
use crate::protocol::WireBlock;

/// Blocks per request while installing the resident set.
const PRELOAD_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("invalid replay config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error("cache: {0}")]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiveConfig {
    pub sim: SimConfig,
    /// Playback speed; 1 is real time.
    pub time_scale: f64,
    pub client: ClientConfig,
}

impl LiveConfig {
    /// The server link that matches this replay.
    pub fn server_link(&self) -> LinkConfig {
        LinkConfig {
            rtt: Duration::from_secs_f64(self.sim.rtt_ms / 1000.0),
            bandwidth_bps: self.sim.bandwidth_bps.is_finite().then_some(self.sim.bandwidth_bps),
        }
        .scaled(self.time_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveReport {
    pub run: RunReport,
    pub urgent: UrgentStats,
    pub speculative: SpecStats,
    pub resident_blocks: usize,
    pub wall: Duration,
}

#[derive(Debug, Clone, Copy)]
struct FpEntry {
    predicted_ms: f64,
    read: bool,
    downloaded: bool,
}

#[derive(Debug, Default)]
struct Ledger {
    fp: HashMap<BlockId, FpEntry>,
    false_positive_bytes: u64,
    speculative_bytes: u64,
    discarded: u64,
    finished: bool,
}

#[derive(Debug, Clone, Copy)]
struct Clock {
    start: Instant,
    origin_ms: f64,
    scale: f64,
}

impl Clock {
    /// Application time now, in trace milliseconds.
    fn now_ms(&self) -> f64 {
        self.origin_ms + self.start.elapsed().as_secs_f64() * 1000.0 * self.scale
    }

    fn wait_for(&self, app_ms: f64) {
        let at = self.start + Duration::from_secs_f64(((app_ms - self.origin_ms) / self.scale / 1000.0).max(0.0));
        let now = Instant::now();
        if at > now {
            thread::sleep(at - now);
        }
    }
}

struct Sink {
    store: Arc<Mutex<BlockStore>>,
    ledger: Arc<Mutex<Ledger>>,
    clock: Clock,
    block_size: u64,
}

impl SpecSink for Sink {
    fn is_cached(&self, block: &BlockId) -> bool {
        self.store.lock().expect("store lock").contains(block)
    }

    fn deliver(&self, b: WireBlock) {
        let mut ledger = self.ledger.lock().expect("ledger lock");
        if ledger.finished {
            return;
        }
        ledger.speculative_bytes += self.block_size;
        if let Some(e) = ledger.fp.get_mut(&b.block) {
            e.downloaded = true;
        }
        let mut store = self.store.lock().expect("store lock");
        if store.contains(&b.block) {
            return;
        }
        match store.insert(b.block, &b.data, true, self.clock.now_ms() as u64) {
            Ok(_) => {}
            Err(CacheError::Exhausted { .. }) => ledger.discarded += 1,
            Err(e) => log::error!("caching {}: {e}", b.block),
        }
    }
}

enum Source<'a> {
    Markov(Predictor<'a>),
    Pairs(&'a PairModel, InFlight),
}

/// Replays `trace` against the server at `addr`, caching under
/// `cache_dir`, which must not already hold a store.
pub fn replay_live(
    model: SimModel<'_>,
    trace: &Trace,
    cfg: &LiveConfig,
    addr: SocketAddr,
    cache_dir: &Path,
) -> Result<LiveReport, LiveError> {
    cfg.sim.validate()?;
    if !(cfg.time_scale > 0.0 && cfg.time_scale.is_finite()) {
        return Err(LiveError::Config(format!("time scale {}", cfg.time_scale)));
    }
    let bs = model.block_size();
    if cfg.client.block_size != bs {
        return Err(LiveError::Config(format!(
            "client block size {} but model block size {bs}",
            cfg.client.block_size
        )));
    }
    if cache_dir.join("journal.log").exists() {
        return Err(LiveError::Config(format!("{} already holds a cache", cache_dir.display())));
    }
    check_manifest(model.files(), trace)?;

    let mut urgent = UrgentClient::connect(addr, cfg.client)?;
    let mut store = BlockStore::open(cache_dir, bs, cfg.sim.temp_limit_bytes)?;
    let resident = resident_prefix(model.resident_ranking(), cfg.sim.b_initial_bytes, bs).selection;
    for chunk in resident.chunks(PRELOAD_CHUNK) {
        for b in urgent.fetch(chunk)? {
            store.install_resident(b.block, &b.data)?;
        }
    }
    let store = Arc::new(Mutex::new(store));
    let preload_stats = urgent.stats();

    let mut source = match model {
        SimModel::Markov(m) => Source::Markov(Predictor::new(&m.superblocks, &m.ctmc, cfg.sim.predictor)),
        SimModel::Pairs(p) => Source::Pairs(p, InFlight::default()),
    };
    let in_flight = match &source {
        Source::Markov(p) => p.in_flight(),
        Source::Pairs(_, f) => f.clone(),
    };
    let origin = trace.records.first().map_or(0, |r| r.timestamp_ms) as f64;
    let clock = Clock {
        start: Instant::now(),
        origin_ms: origin,
        scale: cfg.time_scale,
    };
    let ledger = Arc::new(Mutex::new(Ledger::default()));
    let queue = Arc::new(SpecQueue::new(cfg.sim.queue_capacity));
    let sink = Arc::new(Sink {
        store: Arc::clone(&store),
        ledger: Arc::clone(&ledger),
        clock,
        block_size: bs,
    });
    let fetcher = SpecFetcher::spawn(
        addr,
        cfg.client,
        cfg.sim.spec_batch_blocks,
        Arc::clone(&queue),
        in_flight.clone(),
        sink,
    )
    .map_err(|e| LiveError::Config(format!("starting speculative thread: {e}")))?;

    let mut rep = RunReport {
        trace_id: trace.id.clone(),
        ..Default::default()
    };
    let mut stall = 0.0;
    let mut misses = Vec::new();
    let outcome = (|| -> Result<(), LiveError> {
        for rec in &trace.records {
            let t = rec.timestamp_ms as f64 + stall;
            clock.wait_for(t);
            let reads = expand_record(rec, bs);

            let mut wanted = Vec::new();
            {
                let mut st = store.lock().expect("store lock");
                st.unpin_stale(t as u64, cfg.sim.fp_window_ms);
                for br in &reads {
                    match &mut source {
                        Source::Markov(p) => {
                            if let Some(req) = p.observe(*br, |b| st.contains(b)) {
                                wanted.extend(req.blocks);
                            }
                        }
                        Source::Pairs(pm, flight) => wanted.extend(
                            pm.predict_pairs(&br.block)
                                .into_iter()
                                .filter(|b| !st.contains(b) && flight.insert(*b)),
                        ),
                    }
                }
            }
            if !wanted.is_empty() {
                rep.blocks_predicted += wanted.len() as u64;
                let mut l = ledger.lock().expect("ledger lock");
                for b in &wanted {
                    let e = FpEntry {
                        predicted_ms: t,
                        read: false,
                        downloaded: false,
                    };
                    if let Some(old) = l.fp.insert(*b, e) {
                        if old.downloaded && !old.read {
                            l.false_positive_bytes += bs;
                        }
                    }
                }
                drop(l);
                for d in queue.push(&wanted, t as u64) {
                    in_flight.remove(&d);
                }
            }

            misses.clear();
            {
                let mut l = ledger.lock().expect("ledger lock");
                for br in &reads {
                    if let Some(e) = l.fp.get_mut(&br.block) {
                        if !e.read && t - e.predicted_ms <= cfg.sim.fp_window_ms as f64 {
                            e.read = true;
                        }
                    }
                }
            }
            {
                let mut st = store.lock().expect("store lock");
                for br in &reads {
                    rep.accesses += 1;
                    match st.read(&br.block)? {
                        ReadOutcome::Hit { resident: true, .. } => rep.resident_hits += 1,
                        ReadOutcome::Hit { resident: false, .. } => rep.temp_hits += 1,
                        ReadOutcome::Miss => misses.push(br.block),
                    }
                }
            }
            if !misses.is_empty() {
                let t0 = Instant::now();
                let got = urgent.fetch(&misses)?;
                let waited = t0.elapsed().as_secs_f64() * 1000.0 * cfg.time_scale;
                let mut st = store.lock().expect("store lock");
                for b in got {
                    // A full cache of pinned blocks still serves the read.
                    match st.insert(b.block, &b.data, false, (t + waited) as u64) {
                        Ok(_) | Err(CacheError::Exhausted { .. }) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
                rep.urgent_bytes += misses.len() as u64 * bs;
                rep.stalls += 1;
                stall += waited;
            }
        }
        Ok(())
    })();
    ledger.lock().expect("ledger lock").finished = true;
    let speculative = fetcher.stop();
    outcome?;

    let l = ledger.lock().expect("ledger lock");
    let st = store.lock().expect("store lock");
    rep.false_positive_bytes =
        l.false_positive_bytes + l.fp.values().filter(|e| e.downloaded && !e.read).count() as u64 * bs;
    rep.speculative_bytes = l.speculative_bytes;
    rep.discarded_downloads = l.discarded;
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
    rep.evictions = st.stats().evictions;
    rep.queue_dropped = queue.dropped();
    if let Source::Markov(p) = &source {
        rep.predictor = p.stats();
    }
    let mut urgent_stats = urgent.stats();
    urgent_stats.fetches -= preload_stats.fetches;
    urgent_stats.blocks -= preload_stats.blocks;
    urgent_stats.total_latency -= preload_stats.total_latency;
    Ok(LiveReport {
        run: rep,
        urgent: urgent_stats,
        speculative,
        resident_blocks: resident.len(),
        wall: clock.start.elapsed(),
    })
}
