//! The deployable app model: superblocks, Markov chain, resident ranking
//! and the file table they refer to, in one file.
//!
//! ```text
//! magic     8 bytes  "SFAPPMDL"
//! version   u32 LE   = 1
//! json_len  u32 LE
//! json      metadata (params, block size, files, superblocks, ranking)
//! ctmc_len  u32 LE
//! ctmc      Markov chain in its own binary format
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::resident_ranking;
use crate::ctmc::{CtmcError, CtmcModel};
use crate::grouping::{
    build_superblocks, to_superblock_sequence, Coverage, GroupingError, GroupingParams, Superblock,
    SuperblockSequence, SuperblockSet,
};
use crate::trace::{BlockId, FileEntry, FileTable, Trace};

const MAGIC: &[u8; 8] = b"SFAPPMDL";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum BundleError {
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error("bundle format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for BundleError {
    fn from(e: std::io::Error) -> Self {
        BundleError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub traces: Vec<String>,
    pub partitions: usize,
    pub equivalent_partitions: usize,
    pub coverage: Coverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppModel {
    pub block_size: u64,
    pub params: GroupingParams,
    pub files: Vec<FileEntry>,
    pub superblocks: SuperblockSet,
    pub ctmc: CtmcModel,
    /// Blocks in resident-set priority order.
    pub resident_ranking: Vec<BlockId>,
    pub training: TrainingSummary,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    block_size: u64,
    params: GroupingParams,
    files: Vec<FileEntry>,
    superblocks: Vec<Superblock>,
    resident_ranking: Vec<BlockId>,
    training: TrainingSummary,
}

/// Runs the whole offline pipeline on a training corpus.
pub fn train_app_model(
    traces: &[Trace],
    table: &FileTable,
    params: &GroupingParams,
    block_size: u64,
) -> Result<AppModel, BundleError> {
    let grouping = build_superblocks(traces, params, block_size)?;
    let (sequences, coverage) = sequences(traces, &grouping.superblocks, params, block_size);
    let ctmc = CtmcModel::train(&sequences, grouping.superblocks.len())?;
    log::info!(
        "trained {} superblocks, {} transitions, {}/{} partitions matched",
        grouping.superblocks.len(),
        ctmc.transition_count(),
        coverage.matched,
        coverage.partitions
    );
    Ok(AppModel {
        block_size,
        params: *params,
        files: table.entries().to_vec(),
        ctmc,
        resident_ranking: resident_ranking(traces, block_size),
        training: TrainingSummary {
            traces: traces.iter().map(|t| t.id.clone()).collect(),
            partitions: grouping.partitions,
            equivalent_partitions: grouping.equivalent_partitions,
            coverage,
        },
        superblocks: grouping.superblocks,
    })
}

/// Maps each trace onto the superblock states.
pub fn sequences(
    traces: &[Trace],
    set: &SuperblockSet,
    params: &GroupingParams,
    block_size: u64,
) -> (Vec<SuperblockSequence>, Coverage) {
    let mut total = Coverage::default();
    let seqs = traces
        .iter()
        .map(|t| {
            let (s, c) = to_superblock_sequence(
                &t.id,
                &t.block_reads(block_size),
                set,
                params.delta_ms,
                params.containment,
            );
            total.partitions += c.partitions;
            total.matched += c.matched;
            total.unmatched += c.unmatched;
            s
        })
        .collect();
    (seqs, total)
}

impl AppModel {
    pub fn file_table(&self) -> FileTable {
        FileTable::from_entries(self.files.clone())
    }

    /// Bytes of distinct content the model knows about.
    pub fn content_bytes(&self) -> u64 {
        self.files.iter().filter_map(|f| f.size).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            block_size: self.block_size,
            params: self.params,
            files: self.files.clone(),
            superblocks: self.superblocks.superblocks.clone(),
            resident_ranking: self.resident_ranking.clone(),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let ctmc = self.ctmc.to_bytes();
        let mut out = Vec::with_capacity(16 + json.len() + ctmc.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(ctmc.len() as u32).to_le_bytes());
        out.extend_from_slice(&ctmc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<AppModel, BundleError> {
        let fmt = |m: &str| BundleError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("not an app model file"));
        }
        let u32_at = |pos: usize| -> Result<u32, BundleError> {
            bytes
                .get(pos..pos + 4)
                .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
                .ok_or_else(|| fmt("truncated"))
        };
        let version = u32_at(8)?;
        if version != BUNDLE_VERSION {
            return Err(BundleError::Format(format!("unsupported version {version}")));
        }
        let json_len = u32_at(12)? as usize;
        let json = bytes.get(16..16 + json_len).ok_or_else(|| fmt("truncated"))?;
        let meta: Meta =
            serde_json::from_slice(json).map_err(|e| BundleError::Format(format!("metadata: {e}")))?;
        let ctmc_at = 16 + json_len;
        let ctmc_len = u32_at(ctmc_at)? as usize;
        let ctmc_bytes = bytes
            .get(ctmc_at + 4..ctmc_at + 4 + ctmc_len)
            .ok_or_else(|| fmt("truncated"))?;
        if ctmc_at + 4 + ctmc_len != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        let ctmc = CtmcModel::from_bytes(ctmc_bytes)?;
        if ctmc.num_states() != meta.superblocks.len() {
            return Err(BundleError::Format(format!(
                "{} superblocks but {} Markov states",
                meta.superblocks.len(),
                ctmc.num_states()
            )));
        }
        if meta.superblocks.iter().enumerate().any(|(i, s)| s.id as usize != i) {
            return Err(fmt("superblock ids are not dense"));
        }
        Ok(AppModel {
            block_size: meta.block_size,
            params: meta.params,
            files: meta.files,
            superblocks: SuperblockSet::new(meta.superblocks),
            ctmc,
            resident_ranking: meta.resident_ranking,
            training: meta.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BundleError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AppModel, BundleError> {
        AppModel::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_trace, SynthSpec};

    fn corpus(n: u64) -> (Vec<Trace>, FileTable) {
        let spec = SynthSpec::reference_game();
        let mut table = FileTable::new();
        let traces = (0..n).map(|s| synth_trace(&spec, s, &mut table).unwrap()).collect();
        (traces, table)
    }

    #[test]
    fn two_synthetic_traces_train() {
        let (traces, table) = corpus(2);
        let m = train_app_model(&traces, &table, &GroupingParams::default(), 4096).unwrap();
        assert!(!m.superblocks.is_empty());
        assert_eq!(m.ctmc.num_states(), m.superblocks.len());
        assert!(m.training.coverage.matched > 0);
    }

    #[test]
    fn bytes_round_trip_and_stable() {
        let (traces, table) = corpus(3);
        let m = train_app_model(&traces, &table, &GroupingParams::default(), 4096).unwrap();
        let bytes = m.to_bytes();
        let back = AppModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let again = train_app_model(&traces, &table, &GroupingParams::default(), 4096).unwrap();
        assert_eq!(again.to_bytes(), bytes);
    }

    #[test]
    fn degenerate_min_size_still_valid() {
        let (traces, table) = corpus(2);
        let params = GroupingParams {
            min_superblock_size: 1_000_000,
            ..Default::default()
        };
        let m = train_app_model(&traces, &table, &params, 4096).unwrap();
        assert!(!m.superblocks.is_empty());
        m.ctmc.validate().unwrap();
        AppModel::from_bytes(&m.to_bytes()).unwrap();
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(AppModel::from_bytes(b"nope"), Err(BundleError::Format(_))));
        let (traces, table) = corpus(2);
        let mut bytes = train_app_model(&traces, &table, &GroupingParams::default(), 4096)
            .unwrap()
            .to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(AppModel::from_bytes(&bytes).is_err());
    }
}
