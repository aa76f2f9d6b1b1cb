//! Threaded block server. Each connection gets a reader thread, which
//! stamps requests on arrival, and a writer thread that answers them in
//! order through the shared [`Link`].

use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use streamfetch_core::trace::BlockId;

use crate::link::{Link, LinkConfig, LinkEvent, UrgentGuard};
use crate::protocol::{
    encode_block, parse_request, read_body, read_head, response_head, write_error, ErrorFrame, Priority,
    ProtoError, Request, Status, MAX_REQUEST_BLOCKS,
};
use crate::root::BlockRoot;

#[derive(Debug, Clone, Copy, Default)]
pub struct ServerConfig {
    pub link: LinkConfig,
    /// Keep a log of link events for inspection.
    pub record_events: bool,
}

#[derive(Debug, Default)]
struct Counters {
    urgent_requests: AtomicU64,
    speculative_requests: AtomicU64,
    blocks_sent: AtomicU64,
    errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub urgent_requests: u64,
    pub speculative_requests: u64,
    pub blocks_sent: u64,
    pub errors: u64,
}

struct Shared {
    root: BlockRoot,
    link: Arc<Link>,
    counters: Counters,
    stop: AtomicBool,
    conns: Mutex<Vec<TcpStream>>,
}

pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

/// Binds and starts serving `root` in background threads.
pub fn serve(root: BlockRoot, bind: impl ToSocketAddrs, cfg: ServerConfig) -> io::Result<Server> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        root,
        link: Arc::new(Link::new(cfg.link, cfg.record_events)),
        counters: Counters::default(),
        stop: AtomicBool::new(false),
        conns: Mutex::new(Vec::new()),
    });
    let s = Arc::clone(&shared);
    let accept = thread::Builder::new()
        .name("blocks-accept".into())
        .spawn(move || accept_loop(listener, s))?;
    log::info!("serving {} on {addr}", shared.root.dir().display());
    Ok(Server {
        addr,
        shared,
        accept: Some(accept),
    })
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn events(&self) -> Vec<LinkEvent> {
        self.shared.link.events()
    }

    pub fn stats(&self) -> ServerStats {
        let c = &self.shared.counters;
        ServerStats {
            urgent_requests: c.urgent_requests.load(Ordering::Relaxed),
            speculative_requests: c.speculative_requests.load(Ordering::Relaxed),
            blocks_sent: c.blocks_sent.load(Ordering::Relaxed),
            errors: c.errors.load(Ordering::Relaxed),
        }
    }

    /// Blocks the caller until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        for c in self.shared.conns.lock().expect("conns lock").drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Err(e) = start_connection(stream, &shared) {
            log::warn!("connection setup: {e}");
        }
    }
}

enum Job {
    Serve {
        req: Request,
        arrived: Instant,
        urgent: Option<UrgentGuard>,
    },
    Reject(ErrorFrame),
}

fn start_connection(stream: TcpStream, shared: &Arc<Shared>) -> io::Result<()> {
    let peer = stream.peer_addr()?;
    shared.conns.lock().expect("conns lock").push(stream.try_clone()?);
    let (tx, rx) = mpsc::channel::<Job>();
    let reader = stream.try_clone()?;
    let s = Arc::clone(shared);
    thread::Builder::new()
        .name(format!("blocks-read-{peer}"))
        .spawn(move || read_loop(reader, tx, s))?;
    let s = Arc::clone(shared);
    thread::Builder::new()
        .name(format!("blocks-write-{peer}"))
        .spawn(move || {
            if let Err(e) = write_loop(stream, rx, &s) {
                log::debug!("{peer}: {e}");
            }
        })?;
    Ok(())
}

fn read_loop(stream: TcpStream, tx: mpsc::Sender<Job>, shared: Arc<Shared>) {
    let mut r = BufReader::new(stream);
    loop {
        let head = match read_head(&mut r) {
            Ok(h) => h,
            Err(ProtoError::Io(_)) => return,
            Err(e) => {
                let _ = tx.send(Job::Reject(ErrorFrame {
                    id: 0,
                    status: Status::BadRequest,
                    message: e.to_string(),
                }));
                return;
            }
        };
        let arrived = Instant::now();
        let parsed = read_body(&mut r, &head).and_then(|body| parse_request(&head, &body));
        let req = match parsed {
            Ok(req) => req,
            Err(ProtoError::Io(_)) => return,
            Err(e) => {
                // Framing can no longer be trusted.
                let _ = tx.send(Job::Reject(ErrorFrame {
                    id: head.id,
                    status: Status::BadRequest,
                    message: e.to_string(),
                }));
                return;
            }
        };
        let urgent = match req.priority {
            Priority::Urgent => {
                shared.counters.urgent_requests.fetch_add(1, Ordering::Relaxed);
                Some(shared.link.urgent_arrived())
            }
            Priority::Speculative => {
                shared.counters.speculative_requests.fetch_add(1, Ordering::Relaxed);
                None
            }
        };
        if tx.send(Job::Serve { req, arrived, urgent }).is_err() {
            return;
        }
    }
}

fn load_blocks(root: &BlockRoot, req: &Request) -> Result<Vec<(BlockId, Vec<u8>)>, ErrorFrame> {
    let err = |status, message: String| ErrorFrame {
        id: req.id,
        status,
        message,
    };
    if req.block_count() > MAX_REQUEST_BLOCKS {
        return Err(err(
            Status::BadRequest,
            format!("{} blocks requested, at most {MAX_REQUEST_BLOCKS}", req.block_count()),
        ));
    }
    if root.block_count(req.file.0).is_none() {
        return Err(err(Status::NotFound, format!("no file {}", req.file)));
    }
    req.blocks()
        .map(|b| match root.read_block(b) {
            Ok(Some(d)) => Ok((b, d)),
            Ok(None) => Err(err(Status::NotFound, format!("no block {b}"))),
            Err(e) => Err(err(Status::Internal, format!("reading {b}: {e}"))),
        })
        .collect()
}

fn write_loop(mut stream: TcpStream, rx: mpsc::Receiver<Job>, shared: &Shared) -> io::Result<()> {
    let bs = shared.root.block_size();
    for job in rx {
        let (req, arrived, urgent) = match job {
            Job::Serve { req, arrived, urgent } => (req, arrived, urgent),
            Job::Reject(e) => {
                shared.counters.errors.fetch_add(1, Ordering::Relaxed);
                write_error(&mut stream, &e)?;
                return Ok(());
            }
        };
        let blocks = match load_blocks(&shared.root, &req) {
            Ok(b) => b,
            Err(e) => {
                shared.counters.errors.fetch_add(1, Ordering::Relaxed);
                drop(urgent);
                write_error(&mut stream, &e)?;
                continue;
            }
        };
        let head = response_head(req.id, blocks.len() as u32, bs)?;
        match urgent {
            Some(mut g) => {
                g.begin();
                stream.write_all(&head)?;
                for (b, d) in &blocks {
                    g.send_block(bs, || stream.write_all(&encode_block(*b, d)))?;
                }
            }
            None => {
                shared.link.wait_rtt(arrived);
                stream.write_all(&head)?;
                for (b, d) in &blocks {
                    shared
                        .link
                        .send_speculative(arrived, *b, bs, || stream.write_all(&encode_block(*b, d)))?;
                }
            }
        }
        shared
            .counters
            .blocks_sent
            .fetch_add(blocks.len() as u64, Ordering::Relaxed);
    }
    Ok(())
}
