//! On-disk content served by the block server.
//!
//! A block root holds `manifest.tsv` (`id<TAB>path<TAB>size` per line) and
//! one `data/<id>.bin` per file with the file's bytes.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use streamfetch_core::trace::{BlockId, FileEntry, FileTable};
use thiserror::Error;
use walkdir::WalkDir;

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Error)]
pub enum RootError {
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{0}")]
    Content(String),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> RootError + '_ {
    move |source| RootError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug)]
struct RootFile {
    path: String,
    size: u64,
    data: File,
}

#[derive(Debug)]
pub struct BlockRoot {
    dir: PathBuf,
    block_size: u64,
    files: Vec<Option<RootFile>>,
}

impl BlockRoot {
    pub fn open(dir: &Path, block_size: u64) -> Result<BlockRoot, RootError> {
        let mpath = dir.join(MANIFEST);
        let reader = BufReader::new(File::open(&mpath).map_err(io_at(&mpath))?);
        let mut files: Vec<Option<RootFile>> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_at(&mpath))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| RootError::Manifest { line: i + 1, message };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(format!("expected 3 columns, got {}", cols.len())));
            }
            let id: usize = cols[0].parse().map_err(|_| bad(format!("bad id {:?}", cols[0])))?;
            let size: u64 = cols[2].parse().map_err(|_| bad(format!("bad size {:?}", cols[2])))?;
            let dpath = dir.join("data").join(format!("{id}.bin"));
            let data = File::open(&dpath).map_err(io_at(&dpath))?;
            let on_disk = data.metadata().map_err(io_at(&dpath))?.len();
            if on_disk != size {
                return Err(bad(format!("{} holds {on_disk} bytes, manifest says {size}", dpath.display())));
            }
            if files.len() <= id {
                files.resize_with(id + 1, || None);
            }
            if files[id].is_some() {
                return Err(bad(format!("duplicate id {id}")));
            }
            files[id] = Some(RootFile {
                path: cols[1].to_string(),
                size,
                data,
            });
        }
        Ok(BlockRoot {
            dir: dir.to_path_buf(),
            block_size,
            files,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn file_table(&self) -> FileTable {
        FileTable::from_entries(
            self.files
                .iter()
                .map(|f| match f {
                    Some(f) => FileEntry {
                        path: f.path.clone(),
                        size: Some(f.size),
                    },
                    None => FileEntry {
                        path: String::new(),
                        size: None,
                    },
                })
                .collect(),
        )
    }

    pub fn block_count(&self, file: u32) -> Option<u64> {
        let f = self.files.get(file as usize)?.as_ref()?;
        Some(f.size.div_ceil(self.block_size))
    }

    /// One block, zero padded to the block size. `None` if the block does
    /// not exist.
    pub fn read_block(&self, block: BlockId) -> io::Result<Option<Vec<u8>>> {
        let Some(Some(f)) = self.files.get(block.file.0 as usize) else {
            return Ok(None);
        };
        let start = block.index as u64 * self.block_size;
        if start >= f.size {
            return Ok(None);
        }
        let mut buf = vec![0u8; self.block_size as usize];
        let n = (f.size - start).min(self.block_size) as usize;
        f.data.read_exact_at(&mut buf[..n], start)?;
        Ok(Some(buf))
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic stand-in content for byte `offset..` of a file.
pub fn synthetic_bytes(seed: u64, file: u32, offset: u64, out: &mut [u8]) {
    debug_assert_eq!(offset % 8, 0);
    let base = splitmix(seed ^ ((file as u64) << 40));
    for (i, chunk) in out.chunks_mut(8).enumerate() {
        let w = splitmix(base ^ (offset / 8 + i as u64)).to_le_bytes();
        chunk.copy_from_slice(&w[..chunk.len()]);
    }
}

fn write_manifest(dir: &Path, rows: &[(usize, String, u64)]) -> Result<(), RootError> {
    let mpath = dir.join(MANIFEST);
    let mut out = BufWriter::new(File::create(&mpath).map_err(io_at(&mpath))?);
    for (id, path, size) in rows {
        writeln!(out, "{id}\t{path}\t{size}").map_err(io_at(&mpath))?;
    }
    out.flush().map_err(io_at(&mpath))
}

/// Writes a block root whose files have the table's sizes and synthetic
/// content.
pub fn materialize_synthetic(table: &FileTable, dir: &Path, seed: u64) -> Result<(), RootError> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(io_at(&data_dir))?;
    let mut rows = Vec::new();
    let mut buf = vec![0u8; 1 << 20];
    for (id, e) in table.entries().iter().enumerate() {
        let size = e
            .size
            .ok_or_else(|| RootError::Content(format!("{} has no known size", e.path)))?;
        let p = data_dir.join(format!("{id}.bin"));
        let mut out = BufWriter::new(File::create(&p).map_err(io_at(&p))?);
        let mut off = 0u64;
        while off < size {
            let n = (size - off).min(buf.len() as u64) as usize;
            synthetic_bytes(seed, id as u32, off, &mut buf[..n]);
            out.write_all(&buf[..n]).map_err(io_at(&p))?;
            off += n as u64;
        }
        out.flush().map_err(io_at(&p))?;
        rows.push((id, e.path.clone(), size));
    }
    write_manifest(dir, &rows)
}

/// Copies every regular file under `src` into a block root. Files already
/// named in `table` keep their ids; others are appended. Returns the table
/// actually written.
pub fn shard_tree(src: &Path, dir: &Path, table: &FileTable) -> Result<FileTable, RootError> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(io_at(&data_dir))?;
    let mut out = table.clone();
    let mut found = vec![false; table.len()];
    let mut rows = Vec::new();
    for entry in WalkDir::new(src).sort_by_file_name() {
        let entry = entry.map_err(|e| RootError::Content(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(src)
            .expect("walk stays under its root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let id = out.intern(&rel);
        let dst = data_dir.join(format!("{}.bin", id.0));
        let size = fs::copy(entry.path(), &dst).map_err(io_at(entry.path()))?;
        if let Some(known) = table.size(id) {
            if known != size {
                return Err(RootError::Content(format!("{rel} is {size} bytes, the model expects {known}")));
            }
        }
        if let Some(f) = found.get_mut(id.0 as usize) {
            *f = true;
        }
        out.set_size(id, size);
        rows.push((id.0 as usize, rel, size));
    }
    if let Some(i) = found.iter().position(|f| !f) {
        return Err(RootError::Content(format!(
            "{} is in the model but not under {}",
            table.entries()[i].path,
            src.display()
        )));
    }
    rows.sort();
    write_manifest(dir, &rows)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(sizes: &[(&str, u64)]) -> FileTable {
        let mut t = FileTable::new();
        for (p, s) in sizes {
            let id = t.intern(p);
            t.set_size(id, *s);
        }
        t
    }

    #[test]
    fn materialized_blocks_match_content_fn() {
        let dir = tempfile::tempdir().unwrap();
        materialize_synthetic(&table(&[("a", 10_000), ("b/c", 4096)]), dir.path(), 3).unwrap();
        let root = BlockRoot::open(dir.path(), 4096).unwrap();
        assert_eq!(root.block_count(0), Some(3));
        assert_eq!(root.block_count(1), Some(1));
        assert_eq!(root.block_count(2), None);
        let mut want = vec![0u8; 4096];
        synthetic_bytes(3, 0, 4096, &mut want);
        assert_eq!(root.read_block(BlockId::new(0, 1)).unwrap().unwrap(), want);
        // Tail block is padded.
        let tail = root.read_block(BlockId::new(0, 2)).unwrap().unwrap();
        assert_eq!(tail.len(), 4096);
        assert!(tail[10_000 - 8192..].iter().all(|&b| b == 0));
        assert!(root.read_block(BlockId::new(0, 3)).unwrap().is_none());
        assert!(root.read_block(BlockId::new(7, 0)).unwrap().is_none());
        assert_eq!(root.file_table().lookup("b/c").map(|f| f.0), Some(1));
    }

    #[test]
    fn shard_keeps_model_ids() {
        let src = tempfile::tempdir().unwrap();
        fs::create_dir_all(src.path().join("game")).unwrap();
        fs::write(src.path().join("game/z.bin"), vec![7u8; 5000]).unwrap();
        fs::write(src.path().join("game/a.bin"), vec![1u8; 100]).unwrap();
        let model = table(&[("game/z.bin", 5000)]);
        let dir = tempfile::tempdir().unwrap();
        let t = shard_tree(src.path(), dir.path(), &model).unwrap();
        assert_eq!(t.lookup("game/z.bin").unwrap().0, 0);
        assert_eq!(t.lookup("game/a.bin").unwrap().0, 1);
        let root = BlockRoot::open(dir.path(), 4096).unwrap();
        assert_eq!(root.read_block(BlockId::new(0, 1)).unwrap().unwrap()[..904], [7u8; 904]);

        let wrong = table(&[("game/z.bin", 1)]);
        assert!(shard_tree(src.path(), tempfile::tempdir().unwrap().path(), &wrong).is_err());
        let missing = table(&[("nope", 1)]);
        assert!(shard_tree(src.path(), tempfile::tempdir().unwrap().path(), &missing).is_err());
    }

    #[test]
    fn manifest_errors_have_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "0\ta\n").unwrap();
        match BlockRoot::open(dir.path(), 4096) {
            Err(RootError::Manifest { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
