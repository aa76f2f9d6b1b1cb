//! Read traces: the record model, block expansion and the text trace format.
//!
//! A trace file is UTF-8 text with one read per line:
//!
//! ```text
//! timestamp_ms<TAB>path<TAB>offset<TAB>length
//! ```
//!
//! Lines starting with `#` are comments, except `#file<TAB>path<TAB>size_bytes`
//! which declares a manifest entry. Extra tab-separated columns are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default block granularity in bytes.
pub const BLOCK_SIZE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FileId(pub u32);

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

/// A `block_size`-aligned block of one file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub file: FileId,
    pub index: u32,
}

impl BlockId {
    pub const fn new(file: u32, index: u32) -> Self {
        BlockId {
            file: FileId(file),
            index,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.index)
    }
}

/// One file read system call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadRecord {
    pub timestamp_ms: u64,
    pub file: FileId,
    pub offset: u64,
    pub length: u64,
}

/// A single block touched by a read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRead {
    pub timestamp_ms: u64,
    pub block: BlockId,
}

/// Splits a byte-range read into the blocks it touches, in ascending order.
pub fn expand_record(record: &ReadRecord, block_size: u64) -> Vec<BlockRead> {
    assert!(block_size > 0, "block size must be positive");
    if record.length == 0 {
        return Vec::new();
    }
    let first = record.offset / block_size;
    let last = (record.offset + record.length - 1) / block_size;
    (first..=last)
        .map(|index| BlockRead {
            timestamp_ms: record.timestamp_ms,
            block: BlockId {
                file: record.file,
                index: index as u32,
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub size: Option<u64>,
}

/// Interns file paths to dense [`FileId`]s. One table is shared by every
/// trace of a corpus so that ids agree across traces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileTable {
    entries: Vec<FileEntry>,
    by_path: HashMap<String, FileId>,
}

impl FileTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<FileEntry>) -> Self {
        let by_path = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.path.clone(), FileId(i as u32)))
            .collect();
        FileTable { entries, by_path }
    }

    pub fn intern(&mut self, path: &str) -> FileId {
        if let Some(id) = self.by_path.get(path) {
            return *id;
        }
        let id = FileId(self.entries.len() as u32);
        self.entries.push(FileEntry {
            path: path.to_string(),
            size: None,
        });
        self.by_path.insert(path.to_string(), id);
        id
    }

    pub fn lookup(&self, path: &str) -> Option<FileId> {
        self.by_path.get(path).copied()
    }

    pub fn path(&self, id: FileId) -> Option<&str> {
        self.entries.get(id.0 as usize).map(|e| e.path.as_str())
    }

    pub fn size(&self, id: FileId) -> Option<u64> {
        self.entries.get(id.0 as usize).and_then(|e| e.size)
    }

    pub fn set_size(&mut self, id: FileId, size: u64) {
        if let Some(e) = self.entries.get_mut(id.0 as usize) {
            e.size = Some(size);
        }
    }

    pub fn entries(&self) -> &[FileEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// An ordered sequence of reads from one application run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub id: String,
    pub records: Vec<ReadRecord>,
    /// Declared file sizes, if the trace carried a manifest.
    pub manifest: BTreeMap<FileId, u64>,
}

impl Trace {
    pub fn new(id: impl Into<String>, records: Vec<ReadRecord>) -> Self {
        Trace {
            id: id.into(),
            records,
            manifest: BTreeMap::new(),
        }
    }

    pub fn block_reads(&self, block_size: u64) -> Vec<BlockRead> {
        self.records
            .iter()
            .flat_map(|r| expand_record(r, block_size))
            .collect()
    }

    pub fn is_sorted(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[0].timestamp_ms <= w[1].timestamp_ms)
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.length).sum()
    }

    pub fn duration_ms(&self) -> u64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.timestamp_ms - a.timestamp_ms,
            _ => 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("empty trace")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: timestamp {timestamp} is earlier than the previous record")]
    Unsorted { line: usize, timestamp: u64 },
    #[error("line {line}: read [{offset}, {end}) exceeds declared size {size} of {path}")]
    BeyondManifest {
        line: usize,
        path: String,
        offset: u64,
        end: u64,
        size: u64,
    },
    #[error("path {0:?} cannot be written to a trace file")]
    UnwritablePath(String),
    #[error("file id {0} is not in the file table")]
    UnknownFile(FileId),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TraceError {
    fn from(e: std::io::Error) -> Self {
        TraceError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Reject out-of-order timestamps instead of sorting them.
    pub strict: bool,
}

#[derive(Debug, Clone)]
pub struct ParsedTrace {
    pub trace: Trace,
    /// Set when records were out of order and had to be re-sorted.
    pub resorted: bool,
}

fn field<'a>(
    fields: &mut impl Iterator<Item = &'a str>,
    line: usize,
    name: &str,
) -> Result<&'a str, TraceError> {
    fields.next().ok_or_else(|| TraceError::Malformed {
        line,
        message: format!("missing {name}"),
    })
}

fn number(text: &str, line: usize, name: &str) -> Result<u64, TraceError> {
    text.trim().parse::<u64>().map_err(|_| TraceError::Malformed {
        line,
        message: format!("{name} {text:?} is not a non-negative integer"),
    })
}

/// Parses a trace, interning its paths into `table`.
pub fn parse_trace<R: BufRead>(
    input: R,
    id: &str,
    table: &mut FileTable,
    opts: ParseOptions,
) -> Result<ParsedTrace, TraceError> {
    let mut records = Vec::new();
    let mut manifest = BTreeMap::new();
    let mut resorted = false;
    let mut lines_of = Vec::new();

    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#file\t") {
            let mut f = rest.split('\t');
            let path = field(&mut f, lineno, "path")?;
            let size = number(field(&mut f, lineno, "size")?, lineno, "size")?;
            let fid = table.intern(path);
            table.set_size(fid, size);
            manifest.insert(fid, size);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut f = line.split('\t');
        let timestamp_ms = number(field(&mut f, lineno, "timestamp")?, lineno, "timestamp")?;
        let path = field(&mut f, lineno, "path")?;
        if path.is_empty() {
            return Err(TraceError::Malformed {
                line: lineno,
                message: "empty path".into(),
            });
        }
        let offset = number(field(&mut f, lineno, "offset")?, lineno, "offset")?;
        let length = number(field(&mut f, lineno, "length")?, lineno, "length")?;
        let end = offset.checked_add(length).ok_or_else(|| TraceError::Malformed {
            line: lineno,
            message: "offset + length overflows".into(),
        })?;
        let file = table.intern(path);
        if let Some(&size) = manifest.get(&file) {
            if end > size {
                return Err(TraceError::BeyondManifest {
                    line: lineno,
                    path: path.to_string(),
                    offset,
                    end,
                    size,
                });
            }
        }
        if let Some(prev) = records.last().map(|r: &ReadRecord| r.timestamp_ms) {
            if timestamp_ms < prev {
                if opts.strict {
                    return Err(TraceError::Unsorted {
                        line: lineno,
                        timestamp: timestamp_ms,
                    });
                }
                resorted = true;
            }
        }
        records.push(ReadRecord {
            timestamp_ms,
            file,
            offset,
            length,
        });
        lines_of.push(lineno);
    }

    if records.is_empty() {
        return Err(TraceError::Empty);
    }
    if resorted {
        log::warn!("trace {id}: records out of timestamp order, re-sorted");
        records.sort_by_key(|r| r.timestamp_ms);
    }
    Ok(ParsedTrace {
        trace: Trace {
            id: id.to_string(),
            records,
            manifest,
        },
        resorted,
    })
}

/// Writes `trace` in the text format. Manifest lines come first.
pub fn write_trace<W: Write>(trace: &Trace, table: &FileTable, mut out: W) -> Result<(), TraceError> {
    let path_of = |fid: FileId| -> Result<&str, TraceError> {
        let p = table.path(fid).ok_or(TraceError::UnknownFile(fid))?;
        if p.is_empty() || p.contains(['\t', '\n', '\r']) || p.starts_with('#') {
            return Err(TraceError::UnwritablePath(p.to_string()));
        }
        Ok(p)
    };
    writeln!(out, "# trace {}", trace.id)?;
    for (&fid, &size) in &trace.manifest {
        writeln!(out, "#file\t{}\t{}", path_of(fid)?, size)?;
    }
    for r in &trace.records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.timestamp_ms,
            path_of(r.file)?,
            r.offset,
            r.length
        )?;
    }
    Ok(())
}

pub fn trace_to_string(trace: &Trace, table: &FileTable) -> Result<String, TraceError> {
    let mut buf = Vec::new();
    write_trace(trace, table, &mut buf)?;
    Ok(String::from_utf8(buf).expect("trace text is utf-8"))
}
