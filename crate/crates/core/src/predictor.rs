//! Online prediction: rolling partitions over live reads, current-state
//! tracking, playing-speed estimation and prefetch gating.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::CtmcModel;
use crate::grouping::SuperblockSet;
use crate::trace::{BlockId, BlockRead};

pub const SPEED_SMOOTHING: f64 = 0.3;
pub const SPEED_MIN: f64 = 0.25;
pub const SPEED_MAX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub delta_ms: u64,
    pub tau: f64,
    pub p_stop: f64,
    pub p_download: f64,
    pub lookahead_ms: f64,
    pub containment: f64,
    /// Scale the lookahead by the observed playing speed.
    pub adapt_speed: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            delta_ms: 100,
            tau: 0.9,
            p_stop: 0.01,
            p_download: 0.02,
            lookahead_ms: 60_000.0,
            containment: 0.9,
            adapt_speed: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid predictor configuration: {0}")]
pub struct ConfigError(pub String);

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        if self.delta_ms == 0 {
            return bad("delta_ms must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} not in (0, 1]", self.tau));
        }
        if !(self.p_stop > 0.0 && self.p_stop < 1.0) {
            return bad(format!("p_stop {} not in (0, 1)", self.p_stop));
        }
        // Values above 1 are allowed and simply disable prefetching.
        if !(self.p_download >= 0.0) {
            return bad(format!("p_download {} is negative", self.p_download));
        }
        if !(self.lookahead_ms >= 0.0) || !self.lookahead_ms.is_finite() {
            return bad(format!("lookahead {} ms", self.lookahead_ms));
        }
        if !(self.containment > 0.0 && self.containment <= 1.0) {
            return bad(format!("containment {} not in (0, 1]", self.containment));
        }
        Ok(())
    }
}

/// Smoothed ratio of model mean duration to observed duration. Above 1
/// means the user moves faster than the training population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedEstimate {
    pub ratio: f64,
}

impl Default for SpeedEstimate {
    fn default() -> Self {
        SpeedEstimate { ratio: 1.0 }
    }
}

impl SpeedEstimate {
    pub fn update(self, observed_ms: f64, model_mean_ms: f64) -> SpeedEstimate {
        debug_assert!(model_mean_ms > 0.0);
        let sample = model_mean_ms / observed_ms.max(1.0);
        let r = SPEED_SMOOTHING * sample + (1.0 - SPEED_SMOOTHING) * self.ratio;
        SpeedEstimate {
            ratio: r.clamp(SPEED_MIN, SPEED_MAX),
        }
    }
}

pub fn effective_lookahead(config: &PredictorConfig, speed: SpeedEstimate) -> f64 {
    config.lookahead_ms * speed.ratio
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefetchRequest {
    pub blocks: Vec<BlockId>,
    pub sources: Vec<u32>,
    pub issued_ms: u64,
}

/// Blocks requested but not yet delivered. Shared with whoever performs
/// the download, which removes blocks as they land or are abandoned.
#[derive(Debug, Clone, Default)]
pub struct InFlight(Arc<Mutex<HashSet<BlockId>>>);

impl InFlight {
    pub fn contains(&self, b: &BlockId) -> bool {
        self.0.lock().expect("in-flight lock").contains(b)
    }

    pub fn insert(&self, b: BlockId) -> bool {
        self.0.lock().expect("in-flight lock").insert(b)
    }

    pub fn remove(&self, b: &BlockId) -> bool {
        self.0.lock().expect("in-flight lock").remove(b)
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("in-flight lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorStats {
    pub partitions_closed: u64,
    pub matched: u64,
    pub unmatched: u64,
    pub requests: u64,
    pub blocks_requested: u64,
    pub speed_updates: u64,
}

/// What happened at one partition closure, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Closure {
    pub closed_at_ms: u64,
    pub state: Option<u32>,
    /// Predicted superblocks passing `p_download`, soonest first.
    pub predicted: Vec<u32>,
}

pub struct Predictor<'a> {
    superblocks: &'a SuperblockSet,
    model: &'a CtmcModel,
    config: PredictorConfig,
    speed: SpeedEstimate,
    in_flight: InFlight,
    pending: BTreeMap<BlockId, u64>,
    last_ts: Option<u64>,
    current: Option<(u32, u64)>,
    stats: PredictorStats,
    last_closure: Option<Closure>,
}

impl<'a> Predictor<'a> {
    pub fn new(superblocks: &'a SuperblockSet, model: &'a CtmcModel, config: PredictorConfig) -> Self {
        Predictor {
            superblocks,
            model,
            config,
            speed: SpeedEstimate::default(),
            in_flight: InFlight::default(),
            pending: BTreeMap::new(),
            last_ts: None,
            current: None,
            stats: PredictorStats::default(),
            last_closure: None,
        }
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn in_flight(&self) -> InFlight {
        self.in_flight.clone()
    }

    pub fn speed(&self) -> SpeedEstimate {
        self.speed
    }

    pub fn current_state(&self) -> Option<u32> {
        self.current.map(|c| c.0)
    }

    pub fn stats(&self) -> PredictorStats {
        self.stats
    }

    pub fn last_closure(&self) -> Option<&Closure> {
        self.last_closure.as_ref()
    }

    /// Feeds one block read. A read at least `delta_ms` after the previous
    /// one closes the open partition, which may yield a request for blocks
    /// that `is_cached` reports absent and that are not already in flight.
    pub fn observe(&mut self, read: BlockRead, is_cached: impl Fn(&BlockId) -> bool) -> Option<PrefetchRequest> {
        let mut out = None;
        if let Some(last) = self.last_ts {
            if read.timestamp_ms.saturating_sub(last) >= self.config.delta_ms {
                out = self.close(read.timestamp_ms, &is_cached);
            }
        }
        self.pending.entry(read.block).or_insert(read.timestamp_ms);
        self.last_ts = Some(read.timestamp_ms);
        out
    }

    /// Closes the open partition, e.g. at the end of a run.
    pub fn flush(&mut self, now_ms: u64, is_cached: impl Fn(&BlockId) -> bool) -> Option<PrefetchRequest> {
        if self.pending.is_empty() {
            return None;
        }
        self.close(now_ms, &is_cached)
    }

    fn close(&mut self, now_ms: u64, is_cached: &dyn Fn(&BlockId) -> bool) -> Option<PrefetchRequest> {
        let touched = std::mem::take(&mut self.pending);
        self.stats.partitions_closed += 1;
        let matches = self.superblocks.match_partition(&touched, self.config.containment);
        if matches.is_empty() {
            self.stats.unmatched += 1;
            self.last_closure = Some(Closure {
                closed_at_ms: now_ms,
                state: None,
                predicted: Vec::new(),
            });
            return None;
        }
        self.stats.matched += 1;

        // The superblock touched most recently is where the user is now.
        let (state, entered) = matches
            .iter()
            .copied()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");

        if let Some((prev, prev_entered)) = self.current {
            let (first, first_ts) = matches[0];
            if first != prev {
                if let Some(t) = self.model.transition(prev, first) {
                    if t.mean_ms > 0.0 && self.config.adapt_speed {
                        let observed = first_ts.saturating_sub(prev_entered) as f64;
                        self.speed = self.speed.update(observed, t.mean_ms);
                        self.stats.speed_updates += 1;
                    }
                }
            }
        }
        self.current = match self.current {
            Some((prev, since)) if prev == state => Some((prev, since)),
            _ => Some((state, entered)),
        };

        let lookahead = if self.config.adapt_speed {
            effective_lookahead(&self.config, self.speed)
        } else {
            self.config.lookahead_ms
        };
        let prediction = self
            .model
            .predict(state, lookahead, self.config.p_stop)
            .expect("state comes from the model's superblock set");
        let predicted = prediction.above(self.config.p_download);
        self.last_closure = Some(Closure {
            closed_at_ms: now_ms,
            state: Some(state),
            predicted: predicted.clone(),
        });

        let mut blocks = Vec::new();
        let mut sources = Vec::new();
        for s in predicted {
            let Some(sb) = self.superblocks.get(s) else { continue };
            let before = blocks.len();
            for b in &sb.blocks {
                if !is_cached(b) && self.in_flight.insert(*b) {
                    blocks.push(*b);
                }
            }
            if blocks.len() > before {
                sources.push(s);
            }
        }
        if blocks.is_empty() {
            return None;
        }
        self.stats.requests += 1;
        self.stats.blocks_requested += blocks.len() as u64;
        Some(PrefetchRequest {
            blocks,
            sources,
            issued_ms: now_ms,
        })
    }
}
