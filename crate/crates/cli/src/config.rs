//! Run parameters: defaults, then a JSON file, then command-line flags.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};
use streamfetch_core::grouping::GroupingParams;
use streamfetch_core::predictor::PredictorConfig;
use streamfetch_core::queue::DEFAULT_QUEUE_CAPACITY;
use streamfetch_core::sim::{SimConfig, PAPER_B_INITIAL};
use streamfetch_core::trace::BLOCK_SIZE;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    pub delta_ms: u64,
    pub tau: f64,
    pub p_stop: f64,
    pub p_download: f64,
    pub lookahead_s: f64,
    pub min_superblock_size: usize,
    pub b_initial_bytes: u64,
    /// `null` is unlimited.
    pub temp_limit_bytes: Option<u64>,
    pub bandwidth_bps: f64,
    pub rtt_ms: f64,
    pub fp_window_s: f64,
    pub containment: f64,
    pub adapt_speed: bool,
    pub spec_batch_blocks: usize,
    pub queue_capacity: usize,
    pub block_size: u64,
    pub seed: u64,
}

impl Default for Params {
    fn default() -> Self {
        let g = GroupingParams::default();
        let p = PredictorConfig::default();
        let s = SimConfig::default();
        Params {
            delta_ms: g.delta_ms,
            tau: g.tau,
            p_stop: p.p_stop,
            p_download: p.p_download,
            lookahead_s: p.lookahead_ms / 1000.0,
            min_superblock_size: g.min_superblock_size,
            b_initial_bytes: PAPER_B_INITIAL,
            temp_limit_bytes: None,
            bandwidth_bps: s.bandwidth_bps,
            rtt_ms: s.rtt_ms,
            fp_window_s: s.fp_window_ms as f64 / 1000.0,
            containment: g.containment,
            adapt_speed: p.adapt_speed,
            spec_batch_blocks: s.spec_batch_blocks,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            block_size: BLOCK_SIZE,
            seed: 0,
        }
    }
}

/// Flag overrides; each is optional and wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ParamArgs {
    /// JSON file with flat parameter keys.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, global = true)]
    pub delta_ms: Option<u64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub p_stop: Option<f64>,
    #[arg(long, global = true)]
    pub p_download: Option<f64>,
    #[arg(long, global = true)]
    pub lookahead_s: Option<f64>,
    #[arg(long, global = true)]
    pub min_superblock_size: Option<usize>,
    #[arg(long, global = true)]
    pub b_initial_bytes: Option<u64>,
    /// Bytes; "unlimited" removes the limit.
    #[arg(long, global = true)]
    pub temp_limit_bytes: Option<String>,
    #[arg(long, global = true)]
    pub bandwidth_bps: Option<f64>,
    #[arg(long, global = true)]
    pub rtt_ms: Option<f64>,
    #[arg(long, global = true)]
    pub fp_window_s: Option<f64>,
    #[arg(long, global = true)]
    pub containment: Option<f64>,
    #[arg(long, global = true)]
    pub adapt_speed: Option<bool>,
    #[arg(long, global = true)]
    pub spec_batch_blocks: Option<usize>,
    #[arg(long, global = true)]
    pub queue_capacity: Option<usize>,
    #[arg(long, global = true)]
    pub block_size: Option<u64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

fn load_file(path: &Path) -> Result<Params, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl ParamArgs {
    pub fn resolve(&self) -> Result<Params, CliError> {
        let mut p = match &self.config {
            Some(path) => load_file(path)?,
            None => Params::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f { p.$f = v; }
            )*};
        }
        take!(
            delta_ms,
            tau,
            p_stop,
            p_download,
            lookahead_s,
            min_superblock_size,
            b_initial_bytes,
            bandwidth_bps,
            rtt_ms,
            fp_window_s,
            containment,
            adapt_speed,
            spec_batch_blocks,
            queue_capacity,
            block_size,
            seed
        );
        if let Some(t) = &self.temp_limit_bytes {
            p.temp_limit_bytes = match t.as_str() {
                "unlimited" | "none" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| CliError::Config(format!("temp_limit_bytes {s:?}")))?,
                ),
            };
        }
        p.validate()?;
        Ok(p)
    }
}

impl Params {
    pub fn grouping(&self) -> GroupingParams {
        GroupingParams {
            delta_ms: self.delta_ms,
            tau: self.tau,
            min_superblock_size: self.min_superblock_size,
            containment: self.containment,
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            bandwidth_bps: self.bandwidth_bps,
            rtt_ms: self.rtt_ms,
            predictor: PredictorConfig {
                delta_ms: self.delta_ms,
                tau: self.tau,
                p_stop: self.p_stop,
                p_download: self.p_download,
                lookahead_ms: self.lookahead_s * 1000.0,
                containment: self.containment,
                adapt_speed: self.adapt_speed,
            },
            b_initial_bytes: self.b_initial_bytes,
            temp_limit_bytes: self.temp_limit_bytes,
            min_superblock_size: self.min_superblock_size,
            fp_window_ms: (self.fp_window_s * 1000.0).round() as u64,
            spec_batch_blocks: self.spec_batch_blocks,
            queue_capacity: self.queue_capacity,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.block_size == 0 {
            return Err(CliError::Config("block_size must be positive".into()));
        }
        self.grouping()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.sim().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }
}

/// Parses `17.4Mbps`, `17400000`, `13.95e6bps`, `900kbps`.
pub fn parse_bandwidth(s: &str) -> Result<f64, String> {
    let t = s.trim().to_ascii_lowercase();
    let t = t.strip_suffix("bps").unwrap_or(&t);
    let (num, mult) = match t.chars().last() {
        Some('k') => (&t[..t.len() - 1], 1e3),
        Some('m') => (&t[..t.len() - 1], 1e6),
        Some('g') => (&t[..t.len() - 1], 1e9),
        _ => (t, 1.0),
    };
    let v: f64 = num.parse().map_err(|_| format!("bad bandwidth {s:?}"))?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(format!("bandwidth {s:?} must be positive"));
    }
    Ok(v * mult)
}
