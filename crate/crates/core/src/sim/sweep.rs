//! One-parameter-at-a-time sweeps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate, SimConfig, SimError, SimModel, SimReport};
use crate::bundle::{train_app_model, AppModel};
use crate::trace::{FileTable, Trace};

pub const CSV_HEADER: &str = "param,value,delay_ms,false_positive_bytes,hit_rate,miss_bytes,downloaded_bytes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    BandwidthBps,
    RttMs,
    PDownload,
    PStop,
    LookaheadS,
    BInitialBytes,
    TempLimitBytes,
    DeltaMs,
    Tau,
    MinSuperblockSize,
    FpWindowS,
}

const NAMES: [(SweepParam, &str); 11] = [
    (SweepParam::BandwidthBps, "bandwidth_bps"),
    (SweepParam::RttMs, "rtt_ms"),
    (SweepParam::PDownload, "p_download"),
    (SweepParam::PStop, "p_stop"),
    (SweepParam::LookaheadS, "lookahead_s"),
    (SweepParam::BInitialBytes, "b_initial_bytes"),
    (SweepParam::TempLimitBytes, "temp_limit_bytes"),
    (SweepParam::DeltaMs, "delta_ms"),
    (SweepParam::Tau, "tau"),
    (SweepParam::MinSuperblockSize, "min_superblock_size"),
    (SweepParam::FpWindowS, "fp_window_s"),
];

impl SweepParam {
    pub fn name(self) -> &'static str {
        NAMES.iter().find(|(p, _)| *p == self).expect("every param named").1
    }

    /// Changing this parameter needs a retrained model.
    pub fn retrains(self) -> bool {
        matches!(self, SweepParam::DeltaMs | SweepParam::Tau | SweepParam::MinSuperblockSize)
    }

    pub fn apply(self, cfg: &mut SimConfig, v: f64) {
        match self {
            SweepParam::BandwidthBps => cfg.bandwidth_bps = v,
            SweepParam::RttMs => cfg.rtt_ms = v,
            SweepParam::PDownload => cfg.predictor.p_download = v,
            SweepParam::PStop => cfg.predictor.p_stop = v,
            SweepParam::LookaheadS => cfg.predictor.lookahead_ms = v * 1000.0,
            SweepParam::BInitialBytes => cfg.b_initial_bytes = v as u64,
            SweepParam::TempLimitBytes => {
                cfg.temp_limit_bytes = if v < 0.0 { None } else { Some(v as u64) }
            }
            SweepParam::DeltaMs => cfg.predictor.delta_ms = v as u64,
            SweepParam::Tau => cfg.predictor.tau = v,
            SweepParam::MinSuperblockSize => cfg.min_superblock_size = v as usize,
            SweepParam::FpWindowS => cfg.fp_window_ms = (v * 1000.0) as u64,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(p, _)| *p)
            .ok_or_else(|| {
                let all: Vec<&str> = NAMES.iter().map(|(_, n)| *n).collect();
                format!("unknown sweep parameter {s:?}; expected one of {}", all.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub report: SimReport,
}

/// Simulates `tests` once per value of `param`, holding everything else at
/// `base`. Grouping parameters retrain from `training`.
pub fn sweep(
    base: &SimConfig,
    model: &AppModel,
    training: &[Trace],
    table: &FileTable,
    tests: &[Trace],
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepRow>, SimError> {
    if values.is_empty() {
        return Err(SimError::Config("sweep grid is empty".into()));
    }
    values
        .par_iter()
        .map(|&v| {
            let mut cfg = *base;
            param.apply(&mut cfg, v);
            cfg.validate()?;
            let report = if param.retrains() {
                let mut params = model.params;
                params.delta_ms = cfg.predictor.delta_ms;
                params.tau = cfg.predictor.tau;
                params.min_superblock_size = cfg.min_superblock_size;
                let retrained = train_app_model(training, table, &params, model.block_size)?;
                simulate(SimModel::Markov(&retrained), tests, &cfg)?
            } else {
                simulate(SimModel::Markov(model), tests, &cfg)?
            };
            Ok(SweepRow {
                param,
                value: v,
                report,
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.3},{},{:.6},{},{}",
            r.param,
            r.value,
            r.report.total_delay_ms,
            r.report.false_positive_bytes,
            r.report.hit_rate,
            r.report.miss_bytes,
            r.report.downloaded_bytes
        )?;
    }
    Ok(())
}
