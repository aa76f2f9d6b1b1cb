//! Fetch client: a blocking urgent path and a background speculative
//! drain, each on its own kept-alive connection.

use std::collections::HashMap;
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use streamfetch_core::predictor::InFlight;
use streamfetch_core::queue::{coalesce, FetchQueue, QueuedBlock};
use streamfetch_core::trace::BlockId;
use thiserror::Error;

use crate::protocol::{
    parse_error, read_block, read_body, read_head, read_response_count, write_request, Priority, ProtoError,
    Request, Status, WireBlock, ERROR, RESP,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub block_size: u64,
    /// Tries per operation, including the first.
    pub attempts: u32,
    /// Wait before the first retry; doubles each time.
    pub backoff: Duration,
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            block_size: streamfetch_core::trace::BLOCK_SIZE,
            attempts: 3,
            backoff: Duration::from_millis(50),
            connect_timeout: Duration::from_secs(2),
            io_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("{addr}: giving up after {attempts} attempts: {last}")]
    Unreachable {
        addr: SocketAddr,
        attempts: u32,
        last: String,
    },
    #[error("server does not have the requested content ({0}); model and block root disagree")]
    NotFound(String),
    #[error("server rejected request: {status:?}: {message}")]
    Rejected { status: Status, message: String },
}

/// Failure of one attempt.
enum Attempt {
    Retry(String),
    Fatal(FetchError),
}

impl From<io::Error> for Attempt {
    fn from(e: io::Error) -> Self {
        Attempt::Retry(e.to_string())
    }
}

impl From<ProtoError> for Attempt {
    fn from(e: ProtoError) -> Self {
        Attempt::Retry(e.to_string())
    }
}

struct Conn {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

fn connect(addr: SocketAddr, cfg: &ClientConfig) -> io::Result<Conn> {
    let s = TcpStream::connect_timeout(&addr, cfg.connect_timeout)?;
    s.set_nodelay(true)?;
    s.set_read_timeout(Some(cfg.io_timeout))?;
    s.set_write_timeout(Some(cfg.io_timeout))?;
    Ok(Conn {
        reader: BufReader::with_capacity(1 << 16, s.try_clone()?),
        writer: s,
    })
}

fn backoff(cfg: &ClientConfig, attempt: u32) {
    thread::sleep(cfg.backoff * (1 << attempt.min(10)));
}

/// One request per run of same-file ranges, so the wire order is the
/// order of `blocks`.
pub fn build_requests(blocks: &[BlockId], priority: Priority, next_id: &mut u32) -> Vec<Request> {
    let mut out: Vec<Request> = Vec::new();
    for r in coalesce(blocks) {
        match out.last_mut() {
            Some(last) if last.file == r.file => last.ranges.push((r.first, r.count)),
            _ => {
                *next_id = next_id.wrapping_add(1);
                out.push(Request {
                    id: *next_id,
                    priority,
                    file: r.file,
                    ranges: vec![(r.first, r.count)],
                });
            }
        }
    }
    out
}

/// Sends all `reqs` and reads their responses in order, passing each
/// verified block to `on_block`.
fn exchange(
    conn: &mut Conn,
    reqs: &[Request],
    block_size: u64,
    mut on_block: impl FnMut(WireBlock),
) -> Result<(), Attempt> {
    let mut buf = Vec::new();
    for r in reqs {
        write_request(&mut buf, r)?;
    }
    conn.writer.write_all(&buf)?;
    for req in reqs {
        let head = read_head(&mut conn.reader)?;
        if head.id != req.id {
            return Err(Attempt::Retry(format!("response {} for request {}", head.id, req.id)));
        }
        match head.kind {
            RESP => {
                let n = read_response_count(&mut conn.reader, &head, block_size)?;
                if n as u64 != req.block_count() {
                    return Err(Attempt::Retry(format!("{n} blocks for a {}-block request", req.block_count())));
                }
                for want in req.blocks() {
                    let b = read_block(&mut conn.reader, block_size)?;
                    if b.block != want {
                        return Err(Attempt::Retry(format!("got {} where {want} was due", b.block)));
                    }
                    if !b.verify() {
                        return Err(Attempt::Retry(format!("checksum mismatch on {want}")));
                    }
                    on_block(b);
                }
            }
            ERROR => {
                let body = read_body(&mut conn.reader, &head)?;
                let e = parse_error(&head, &body)?;
                return Err(Attempt::Fatal(match e.status {
                    Status::NotFound => FetchError::NotFound(e.message),
                    status => FetchError::Rejected {
                        status,
                        message: e.message,
                    },
                }));
            }
            k => return Err(Attempt::Retry(format!("unexpected frame type {k}"))),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UrgentStats {
    pub fetches: u64,
    pub blocks: u64,
    pub retries: u64,
    pub total_latency: Duration,
    pub max_latency: Duration,
}

/// Blocking fetches for the read path.
pub struct UrgentClient {
    addr: SocketAddr,
    cfg: ClientConfig,
    conn: Option<Conn>,
    next_id: u32,
    stats: UrgentStats,
}

impl UrgentClient {
    /// Connects, retrying with backoff.
    pub fn connect(addr: SocketAddr, cfg: ClientConfig) -> Result<UrgentClient, FetchError> {
        let mut last = String::new();
        for attempt in 0..cfg.attempts {
            if attempt > 0 {
                backoff(&cfg, attempt - 1);
            }
            match connect(addr, &cfg) {
                Ok(c) => {
                    return Ok(UrgentClient {
                        addr,
                        cfg,
                        conn: Some(c),
                        next_id: 0,
                        stats: UrgentStats::default(),
                    })
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(FetchError::Unreachable {
            addr,
            attempts: cfg.attempts,
            last,
        })
    }

    pub fn stats(&self) -> UrgentStats {
        self.stats
    }

    /// Fetches `blocks`, returned in the same order.
    pub fn fetch(&mut self, blocks: &[BlockId]) -> Result<Vec<WireBlock>, FetchError> {
        if blocks.is_empty() {
            return Ok(Vec::new());
        }
        let t0 = Instant::now();
        let reqs = build_requests(blocks, Priority::Urgent, &mut self.next_id);
        let mut last = String::new();
        for attempt in 0..self.cfg.attempts {
            if attempt > 0 {
                self.stats.retries += 1;
                backoff(&self.cfg, attempt - 1);
            }
            let conn = match self.conn.as_mut() {
                Some(c) => c,
                None => match connect(self.addr, &self.cfg) {
                    Ok(c) => self.conn.insert(c),
                    Err(e) => {
                        last = e.to_string();
                        continue;
                    }
                },
            };
            let mut out = Vec::with_capacity(blocks.len());
            match exchange(conn, &reqs, self.cfg.block_size, |b| out.push(b)) {
                Ok(()) => {
                    let dt = t0.elapsed();
                    self.stats.fetches += 1;
                    self.stats.blocks += out.len() as u64;
                    self.stats.total_latency += dt;
                    self.stats.max_latency = self.stats.max_latency.max(dt);
                    return Ok(out);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(m)) => {
                    log::warn!("urgent fetch attempt {} failed: {m}", attempt + 1);
                    self.conn = None;
                    last = m;
                }
            }
        }
        Err(FetchError::Unreachable {
            addr: self.addr,
            attempts: self.cfg.attempts,
            last,
        })
    }
}

/// The download queue shared between the predictor and the speculative
/// thread.
#[derive(Debug)]
pub struct SpecQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
}

#[derive(Debug)]
struct QueueState {
    queue: FetchQueue,
    closed: bool,
}

impl SpecQueue {
    pub fn new(capacity: usize) -> SpecQueue {
        SpecQueue {
            state: Mutex::new(QueueState {
                queue: FetchQueue::new(capacity),
                closed: false,
            }),
            ready: Condvar::new(),
        }
    }

    /// Enqueues in order; returns blocks dropped for room.
    pub fn push(&self, blocks: &[BlockId], predicted_ms: u64) -> Vec<BlockId> {
        let mut st = self.state.lock().expect("queue lock");
        let dropped = st.queue.extend(blocks.iter().copied(), predicted_ms);
        drop(st);
        self.ready.notify_one();
        dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("queue lock").queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().expect("queue lock").queue.dropped()
    }

    pub fn close(&self) {
        self.state.lock().expect("queue lock").closed = true;
        self.ready.notify_all();
    }

    /// Waits for work. `None` once closed.
    fn next_batch(&self, max: usize) -> Option<Vec<QueuedBlock>> {
        let mut st = self.state.lock().expect("queue lock");
        loop {
            if st.closed {
                return None;
            }
            if !st.queue.is_empty() {
                return Some(st.queue.pop_batch(max));
            }
            st = self.ready.wait(st).expect("queue lock");
        }
    }

    fn requeue(&self, blocks: &[QueuedBlock]) -> Vec<BlockId> {
        let mut st = self.state.lock().expect("queue lock");
        let mut dropped = Vec::new();
        for q in blocks {
            if let streamfetch_core::queue::Enqueued::Displaced(b) = st.queue.push(q.block, q.predicted_ms) {
                dropped.push(b);
            }
        }
        dropped
    }
}

/// Where speculative downloads land.
pub trait SpecSink: Send + Sync {
    fn is_cached(&self, block: &BlockId) -> bool;
    /// Stores a downloaded block, pinned.
    fn deliver(&self, block: WireBlock);
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpecStats {
    pub batches: u64,
    pub requests: u64,
    pub blocks: u64,
    pub skipped_cached: u64,
    pub retried: u64,
    pub abandoned: u64,
}

pub struct SpecFetcher {
    queue: Arc<SpecQueue>,
    conn: Arc<Mutex<Option<TcpStream>>>,
    handle: JoinHandle<SpecStats>,
}

impl SpecFetcher {
    /// Starts the background drain. It connects lazily.
    pub fn spawn(
        addr: SocketAddr,
        cfg: ClientConfig,
        batch_blocks: usize,
        queue: Arc<SpecQueue>,
        in_flight: InFlight,
        sink: Arc<dyn SpecSink>,
    ) -> io::Result<SpecFetcher> {
        let conn = Arc::new(Mutex::new(None));
        let worker = SpecWorker {
            addr,
            cfg,
            batch_blocks: batch_blocks.max(1),
            queue: Arc::clone(&queue),
            in_flight,
            sink,
            conn: None,
            shared_conn: Arc::clone(&conn),
            next_id: 0,
            tries: HashMap::new(),
            stats: SpecStats::default(),
        };
        let handle = thread::Builder::new()
            .name("speculative-fetch".into())
            .spawn(move || worker.run())?;
        Ok(SpecFetcher { queue, conn, handle })
    }

    pub fn queue(&self) -> &Arc<SpecQueue> {
        &self.queue
    }

    /// Stops at once, abandoning any transfer in progress.
    pub fn stop(self) -> SpecStats {
        self.queue.close();
        if let Some(s) = self.conn.lock().expect("conn lock").as_ref() {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.handle.join().unwrap_or_default()
    }
}

struct SpecWorker {
    addr: SocketAddr,
    cfg: ClientConfig,
    batch_blocks: usize,
    queue: Arc<SpecQueue>,
    in_flight: InFlight,
    sink: Arc<dyn SpecSink>,
    conn: Option<Conn>,
    shared_conn: Arc<Mutex<Option<TcpStream>>>,
    next_id: u32,
    tries: HashMap<BlockId, u32>,
    stats: SpecStats,
}

impl SpecWorker {
    fn closed(&self) -> bool {
        self.queue.state.lock().expect("queue lock").closed
    }

    fn run(mut self) -> SpecStats {
        while let Some(batch) = self.queue.next_batch(self.batch_blocks) {
            let mut todo = Vec::with_capacity(batch.len());
            for q in batch {
                if self.sink.is_cached(&q.block) {
                    self.in_flight.remove(&q.block);
                    self.stats.skipped_cached += 1;
                } else {
                    todo.push(q);
                }
            }
            if todo.is_empty() {
                continue;
            }
            self.stats.batches += 1;
            self.fetch_batch(&todo);
        }
        self.stats
    }

    fn ensure_conn(&mut self) -> io::Result<()> {
        if self.conn.is_none() {
            let c = connect(self.addr, &self.cfg)?;
            *self.shared_conn.lock().expect("conn lock") = Some(c.writer.try_clone()?);
            if self.closed() {
                let _ = c.writer.shutdown(Shutdown::Both);
            }
            self.conn = Some(c);
        }
        Ok(())
    }

    fn fetch_batch(&mut self, todo: &[QueuedBlock]) {
        let blocks: Vec<BlockId> = todo.iter().map(|q| q.block).collect();
        let reqs = build_requests(&blocks, Priority::Speculative, &mut self.next_id);
        self.stats.requests += reqs.len() as u64;
        let mut delivered = 0usize;
        let bs = self.cfg.block_size;
        let result = match self.ensure_conn() {
            Ok(()) => {
                let conn = self.conn.as_mut().expect("connected");
                let (sink, in_flight, tries) = (&self.sink, &self.in_flight, &mut self.tries);
                exchange(conn, &reqs, bs, |b| {
                    let id = b.block;
                    sink.deliver(b);
                    in_flight.remove(&id);
                    tries.remove(&id);
                    delivered += 1;
                })
            }
            Err(e) => Err(Attempt::from(e)),
        };
        self.stats.blocks += delivered as u64;
        let rest = &todo[delivered..];
        match result {
            Ok(()) => {}
            Err(Attempt::Fatal(e)) => {
                // The model names content the server lacks; retrying is futile.
                log::error!("speculative fetch: {e}");
                self.abandon(rest);
            }
            Err(Attempt::Retry(m)) => {
                self.conn = None;
                *self.shared_conn.lock().expect("conn lock") = None;
                if self.closed() {
                    return;
                }
                log::warn!("speculative batch failed after {delivered} blocks: {m}");
                let mut again = Vec::new();
                let mut give_up = Vec::new();
                for q in rest {
                    let n = self.tries.entry(q.block).or_insert(0);
                    *n += 1;
                    if *n >= self.cfg.attempts {
                        give_up.push(*q);
                    } else {
                        again.push(*q);
                    }
                }
                self.stats.retried += again.len() as u64;
                self.abandon(&give_up);
                for b in self.queue.requeue(&again) {
                    self.in_flight.remove(&b);
                }
                backoff(&self.cfg, 0);
            }
        }
    }

    fn abandon(&mut self, blocks: &[QueuedBlock]) {
        for q in blocks {
            self.in_flight.remove(&q.block);
            self.tries.remove(&q.block);
        }
        self.stats.abandoned += blocks.len() as u64;
    }
}
