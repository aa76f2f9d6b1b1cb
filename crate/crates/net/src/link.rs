//! Server-side model of the client's downlink.
//!
//! Every response waits one round trip after its request arrived, then its
//! blocks leave one at a time, each occupying the link for
//! `block_size * 8 / bandwidth`. Urgent requests preempt: from the moment
//! one arrives, no speculative block starts until it has been sent in full.
//! A speculative block already on the wire finishes first.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use streamfetch_core::trace::BlockId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub rtt: Duration,
    /// `None` leaves the link unthrottled.
    pub bandwidth_bps: Option<f64>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            rtt: Duration::ZERO,
            bandwidth_bps: None,
        }
    }
}

impl LinkConfig {
    pub fn transfer(&self, bytes: u64) -> Duration {
        match self.bandwidth_bps {
            Some(bps) => Duration::from_secs_f64(bytes as f64 * 8.0 / bps),
            None => Duration::ZERO,
        }
    }

    /// The same link with time running `scale` times faster.
    pub fn scaled(&self, scale: f64) -> LinkConfig {
        LinkConfig {
            rtt: self.rtt.div_f64(scale),
            bandwidth_bps: self.bandwidth_bps.map(|b| b * scale),
        }
    }
}

/// Times are offsets from link creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkEvent {
    UrgentArrived { request: u64, at: Duration },
    UrgentDone { request: u64, at: Duration },
    SpecStart { block: BlockId, at: Duration },
    SpecEnd { block: BlockId, at: Duration },
}

#[derive(Debug)]
struct State {
    urgent_pending: usize,
    busy: bool,
    free_at: Instant,
    next_urgent: u64,
    events: Option<Vec<LinkEvent>>,
}

#[derive(Debug)]
pub struct Link {
    cfg: LinkConfig,
    epoch: Instant,
    state: Mutex<State>,
    changed: Condvar,
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

impl Link {
    pub fn new(cfg: LinkConfig, record_events: bool) -> Link {
        let now = Instant::now();
        Link {
            cfg,
            epoch: now,
            state: Mutex::new(State {
                urgent_pending: 0,
                busy: false,
                free_at: now,
                next_urgent: 0,
                events: record_events.then(Vec::new),
            }),
            changed: Condvar::new(),
        }
    }

    pub fn config(&self) -> LinkConfig {
        self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("link lock")
    }

    fn log(&self, st: &mut State, ev: impl FnOnce(Duration) -> LinkEvent) {
        if let Some(evs) = st.events.as_mut() {
            evs.push(ev(self.epoch.elapsed()));
        }
    }

    pub fn events(&self) -> Vec<LinkEvent> {
        self.lock().events.clone().unwrap_or_default()
    }

    /// Registers an urgent request the moment it is read off the socket.
    /// Speculative blocks hold off until the returned guard is dropped.
    pub fn urgent_arrived(self: &Arc<Self>) -> UrgentGuard {
        let mut st = self.lock();
        st.urgent_pending += 1;
        st.next_urgent += 1;
        let request = st.next_urgent;
        self.log(&mut st, |at| LinkEvent::UrgentArrived { request, at });
        UrgentGuard {
            link: Arc::clone(self),
            request,
            arrived: Instant::now(),
            owns_link: false,
        }
    }

    /// Blocks chain from scheduled, not observed, end times so that sleep
    /// overshoot does not accumulate.
    fn next_end(&self, st: &mut State, not_before: Instant, bytes: u64) -> Instant {
        let end = st.free_at.max(not_before) + self.cfg.transfer(bytes);
        st.free_at = end;
        end
    }

    /// Sends one speculative block of a request that arrived at `arrived`
    /// with `send`, once no urgent request is pending and the link is idle.
    pub fn send_speculative<T>(&self, arrived: Instant, block: BlockId, bytes: u64, send: impl FnOnce() -> T) -> T {
        let end = {
            let mut st = self.lock();
            while st.busy || st.urgent_pending > 0 {
                st = self.changed.wait(st).expect("link lock");
            }
            st.busy = true;
            self.log(&mut st, |at| LinkEvent::SpecStart { block, at });
            self.next_end(&mut st, arrived + self.cfg.rtt, bytes)
        };
        sleep_until(end);
        let out = send();
        let mut st = self.lock();
        st.busy = false;
        self.log(&mut st, |at| LinkEvent::SpecEnd { block, at });
        drop(st);
        self.changed.notify_all();
        out
    }

    /// Waits out the round trip of a speculative request.
    pub fn wait_rtt(&self, arrived: Instant) {
        sleep_until(arrived + self.cfg.rtt);
    }
}

/// An urgent request in progress.
#[derive(Debug)]
pub struct UrgentGuard {
    link: Arc<Link>,
    request: u64,
    arrived: Instant,
    owns_link: bool,
}

impl UrgentGuard {
    /// Waits for the round trip and for any speculative block on the wire,
    /// then holds the link for this request's blocks.
    pub fn begin(&mut self) {
        sleep_until(self.arrived + self.link.cfg.rtt);
        let mut st = self.link.lock();
        while st.busy {
            st = self.link.changed.wait(st).expect("link lock");
        }
        st.busy = true;
        self.owns_link = true;
    }

    pub fn send_block<T>(&mut self, bytes: u64, send: impl FnOnce() -> T) -> T {
        debug_assert!(self.owns_link, "begin() first");
        let end = {
            let mut st = self.link.lock();
            self.link.next_end(&mut st, self.arrived + self.link.cfg.rtt, bytes)
        };
        sleep_until(end);
        send()
    }
}

impl Drop for UrgentGuard {
    fn drop(&mut self) {
        let mut st = self.link.lock();
        st.urgent_pending -= 1;
        if self.owns_link {
            st.busy = false;
        }
        let request = self.request;
        self.link.log(&mut st, |at| LinkEvent::UrgentDone { request, at });
        drop(st);
        self.link.changed.notify_all();
    }
}

/// Checks that no speculative block started while an urgent request was
/// outstanding. Returns the first offending pair.
pub fn priority_violation(events: &[LinkEvent]) -> Option<(u64, BlockId)> {
    let mut open: Vec<u64> = Vec::new();
    for ev in events {
        match *ev {
            LinkEvent::UrgentArrived { request, .. } => open.push(request),
            LinkEvent::UrgentDone { request, .. } => open.retain(|&r| r != request),
            LinkEvent::SpecStart { block, .. } => {
                if let Some(&r) = open.first() {
                    return Some((r, block));
                }
            }
            LinkEvent::SpecEnd { .. } => {}
        }
    }
    None
}
