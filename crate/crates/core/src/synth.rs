//! Synthetic scene-graph traces for desk-scale experiments.
//!
//! A run walks a graph of scenes. Entering a scene produces a burst of reads
//! covering the scene's block ranges (plus optional ranges read with some
//! probability), then the run dwells in the scene for a sampled time during
//! which sparse single-block noise reads occur.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{FileId, FileTable, ReadRecord, Trace, BLOCK_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFile {
    pub path: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRange {
    pub path: String,
    pub first_block: u32,
    pub blocks: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionalRange {
    #[serde(flatten)]
    pub range: BlockRange,
    /// Probability the range is read on a given visit.
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dwell {
    pub mean_ms: f64,
    pub stddev_ms: f64,
    #[serde(default = "default_min_dwell")]
    pub min_ms: f64,
}

fn default_min_dwell() -> f64 {
    1_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub ranges: Vec<BlockRange>,
    #[serde(default)]
    pub optional: Vec<OptionalRange>,
    #[serde(default)]
    pub dwell: Option<Dwell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub files: Vec<SynthFile>,
    pub scenes: Vec<Scene>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    /// Starting scene; defaults to the first one.
    #[serde(default)]
    pub start: Option<String>,
    pub dwell: Dwell,
    /// Expected single-block random reads per second of dwell time.
    #[serde(default)]
    pub noise_rate: f64,
    /// Number of read calls a scene burst is split into.
    pub reads_per_scene: usize,
    /// Upper bound on the gap between successive reads inside a burst.
    #[serde(default = "default_jitter")]
    pub jitter_ms: u64,
    #[serde(default = "default_max_visits")]
    pub max_visits: usize,
    #[serde(default = "default_block_size")]
    pub block_size: u64,
}

fn default_jitter() -> u64 {
    20
}
fn default_max_visits() -> usize {
    64
}
fn default_block_size() -> u64 {
    BLOCK_SIZE
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("synth spec has no scenes")]
    NoScenes,
    #[error("unknown scene {0:?}")]
    UnknownScene(String),
    #[error("duplicate scene {0:?}")]
    DuplicateScene(String),
    #[error("unknown file {0:?}")]
    UnknownFile(String),
    #[error("range {first}+{blocks} of {path:?} exceeds the file size")]
    RangeOutOfFile { path: String, first: u32, blocks: u32 },
    #[error("outgoing probabilities of scene {scene:?} sum to {sum}, expected 1")]
    BadProbabilities { scene: String, sum: f64 },
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.scenes.is_empty() {
            return Err(SynthError::NoScenes);
        }
        if self.reads_per_scene == 0 {
            return Err(SynthError::Invalid("reads_per_scene must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(SynthError::Invalid("block_size must be positive".into()));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(SynthError::Invalid("noise_rate must be a finite non-negative rate".into()));
        }
        if self.max_visits == 0 {
            return Err(SynthError::Invalid("max_visits must be at least 1".into()));
        }
        let dwell_ok = |d: &Dwell| d.mean_ms >= 0.0 && d.stddev_ms >= 0.0 && d.min_ms >= 0.0;
        if !dwell_ok(&self.dwell) {
            return Err(SynthError::Invalid("dwell parameters must be non-negative".into()));
        }
        let sizes: HashMap<&str, u64> = self
            .files
            .iter()
            .map(|f| (f.path.as_str(), f.size_bytes))
            .collect();
        let mut names = HashMap::new();
        for s in &self.scenes {
            if names.insert(s.name.as_str(), ()).is_some() {
                return Err(SynthError::DuplicateScene(s.name.clone()));
            }
            if let Some(d) = &s.dwell {
                if !dwell_ok(d) {
                    return Err(SynthError::Invalid(format!("dwell of {:?}", s.name)));
                }
            }
            let all = s.ranges.iter().chain(s.optional.iter().map(|o| &o.range));
            for r in all {
                let size = *sizes
                    .get(r.path.as_str())
                    .ok_or_else(|| SynthError::UnknownFile(r.path.clone()))?;
                let file_blocks = size.div_ceil(self.block_size);
                if r.blocks == 0 || (r.first_block as u64 + r.blocks as u64) > file_blocks {
                    return Err(SynthError::RangeOutOfFile {
                        path: r.path.clone(),
                        first: r.first_block,
                        blocks: r.blocks,
                    });
                }
            }
            for o in &s.optional {
                if !(0.0..=1.0).contains(&o.p) {
                    return Err(SynthError::Invalid(format!("optional range probability {}", o.p)));
                }
            }
        }
        if let Some(start) = &self.start {
            if !names.contains_key(start.as_str()) {
                return Err(SynthError::UnknownScene(start.clone()));
            }
        }
        let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
        for e in &self.edges {
            for n in [&e.from, &e.to] {
                if !names.contains_key(n.as_str()) {
                    return Err(SynthError::UnknownScene(n.clone()));
                }
            }
            if !(0.0..=1.0).contains(&e.p) {
                return Err(SynthError::Invalid(format!("edge probability {}", e.p)));
            }
            *sums.entry(e.from.as_str()).or_default() += e.p;
        }
        for (scene, sum) in sums {
            if (sum - 1.0).abs() > 1e-9 {
                return Err(SynthError::BadProbabilities {
                    scene: scene.to_string(),
                    sum,
                });
            }
        }
        Ok(())
    }

    /// A game-like corpus generator over roughly 50 MiB of content: launch,
    /// menu, then a world map that leads into six levels and a shop until a
    /// level ends the game. Part of the content is rarely or never visited.
    pub fn reference_game() -> SynthSpec {
        let obb = "game/main.obb";
        let range = |first: u32, blocks: u32| BlockRange {
            path: obb.to_string(),
            first_block: first,
            blocks,
        };
        let opt = |first: u32, blocks: u32, p: f64| OptionalRange {
            range: range(first, blocks),
            p,
        };
        // (name, core ranges, optional ranges)
        let scene = |name: &str, ranges: Vec<BlockRange>, optional: Vec<OptionalRange>| Scene {
            name: name.to_string(),
            ranges,
            optional,
            dwell: None,
        };
        let launch = Scene {
            name: "launch".into(),
            ranges: vec![
                BlockRange {
                    path: "game/config.dat".into(),
                    first_block: 0,
                    blocks: 64,
                },
                BlockRange {
                    path: "game/ui.pak".into(),
                    first_block: 0,
                    blocks: 448,
                },
                range(0, 256),
            ],
            optional: vec![],
            dwell: Some(Dwell {
                mean_ms: 6_000.0,
                stddev_ms: 1_000.0,
                min_ms: 3_000.0,
            }),
        };
        let level = |name: &str, first: u32| {
            scene(name, vec![range(first, 1152)], vec![opt(first + 1152, 128, 0.5)])
        };
        let mut map = scene("map", vec![range(512, 256)], vec![]);
        map.dwell = Some(Dwell {
            mean_ms: 8_000.0,
            stddev_ms: 3_000.0,
            min_ms: 3_000.0,
        });
        let scenes = vec![
            launch,
            scene("menu", vec![range(256, 256)], vec![]),
            map,
            level("forest", 768),
            level("desert", 2048),
            level("caves", 3328),
            level("castle", 4608),
            level("harbor", 5888),
            level("sky", 7168),
            scene("shop", vec![range(8448, 512)], vec![]),
            scene("finale", vec![range(8960, 1024)], vec![]),
            scene("credits", vec![range(9984, 256)], vec![opt(10240, 2048, 0.3)]),
        ];
        let edge = |from: &str, to: &str, p: f64| Edge {
            from: from.into(),
            to: to.into(),
            p,
        };
        let mut edges = vec![
            edge("launch", "menu", 1.0),
            edge("menu", "map", 1.0),
            edge("map", "forest", 0.3),
            edge("map", "desert", 0.2),
            edge("map", "caves", 0.15),
            edge("map", "castle", 0.1),
            edge("map", "harbor", 0.1),
            edge("map", "sky", 0.05),
            edge("map", "shop", 0.1),
            edge("shop", "map", 1.0),
            edge("finale", "credits", 1.0),
        ];
        for l in ["forest", "desert", "caves", "castle", "harbor", "sky"] {
            edges.push(edge(l, "map", 0.9));
            edges.push(edge(l, "finale", 0.1));
        }
        SynthSpec {
            files: vec![
                SynthFile {
                    path: "game/config.dat".into(),
                    size_bytes: 64 * 4096,
                },
                SynthFile {
                    path: "game/ui.pak".into(),
                    size_bytes: 448 * 4096 - 1000,
                },
                SynthFile {
                    path: obb.into(),
                    size_bytes: 12288 * 4096,
                },
            ],
            scenes,
            edges,
            start: Some("launch".into()),
            dwell: Dwell {
                mean_ms: 15_000.0,
                stddev_ms: 5_000.0,
                min_ms: 5_000.0,
            },
            noise_rate: 0.05,
            reads_per_scene: 48,
            jitter_ms: 20,
            max_visits: 64,
            block_size: BLOCK_SIZE,
        }
    }
}

/// Generates one trace. Pure in `(spec, seed)`; `table` receives the spec's
/// files in declaration order.
pub fn synth_trace(spec: &SynthSpec, seed: u64, table: &mut FileTable) -> Result<Trace, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = spec.block_size;

    let mut file_ids: HashMap<&str, FileId> = HashMap::new();
    let mut manifest = BTreeMap::new();
    for f in &spec.files {
        let id = table.intern(&f.path);
        table.set_size(id, f.size_bytes);
        file_ids.insert(f.path.as_str(), id);
        manifest.insert(id, f.size_bytes);
    }
    let sizes: HashMap<FileId, u64> = manifest.clone().into_iter().collect();
    let total_blocks: Vec<(FileId, u64)> = spec
        .files
        .iter()
        .map(|f| (file_ids[f.path.as_str()], f.size_bytes.div_ceil(bs)))
        .filter(|(_, n)| *n > 0)
        .collect();
    let all_blocks: u64 = total_blocks.iter().map(|(_, n)| n).sum();

    let scene_idx: HashMap<&str, usize> = spec
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    let mut out_edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); spec.scenes.len()];
    for e in &spec.edges {
        out_edges[scene_idx[e.from.as_str()]].push((scene_idx[e.to.as_str()], e.p));
    }

    let mut records = Vec::new();
    let mut now: u64 = 0;
    let mut current = spec
        .start
        .as_deref()
        .map(|s| scene_idx[s])
        .unwrap_or(0);

    for visit in 0..spec.max_visits {
        let scene = &spec.scenes[current];
        // Selected blocks, per file, ascending.
        let mut chosen: BTreeMap<(FileId, u32), ()> = BTreeMap::new();
        for r in &scene.ranges {
            let f = file_ids[r.path.as_str()];
            for b in r.first_block..r.first_block + r.blocks {
                chosen.insert((f, b), ());
            }
        }
        for o in &scene.optional {
            if rng.random::<f64>() < o.p {
                let f = file_ids[o.range.path.as_str()];
                for b in o.range.first_block..o.range.first_block + o.range.blocks {
                    chosen.insert((f, b), ());
                }
            }
        }
        let blocks: Vec<(FileId, u32)> = chosen.into_keys().collect();
        let per_read = blocks.len().div_ceil(spec.reads_per_scene).max(1);
        let mut first = true;
        for chunk in blocks.chunks(per_read) {
            // One read call per contiguous run inside the chunk.
            let mut start = 0;
            while start < chunk.len() {
                let mut end = start + 1;
                while end < chunk.len()
                    && chunk[end].0 == chunk[start].0
                    && chunk[end].1 == chunk[end - 1].1 + 1
                {
                    end += 1;
                }
                if !first && spec.jitter_ms > 0 {
                    now += rng.random_range(0..=spec.jitter_ms);
                }
                first = false;
                let (file, b0) = chunk[start];
                let offset = b0 as u64 * bs;
                let length = ((end - start) as u64 * bs).min(sizes[&file] - offset);
                records.push(ReadRecord {
                    timestamp_ms: now,
                    file,
                    offset,
                    length,
                });
                start = end;
            }
        }

        let next = pick_next(&out_edges[current], &mut rng);
        let Some(next) = next else { break };
        if visit + 1 == spec.max_visits {
            break;
        }

        let dwell = scene.dwell.unwrap_or(spec.dwell);
        let sampled = if dwell.stddev_ms > 0.0 {
            Normal::new(dwell.mean_ms, dwell.stddev_ms)
                .expect("stddev validated")
                .sample(&mut rng)
        } else {
            dwell.mean_ms
        };
        let dwell_ms = sampled.max(dwell.min_ms).round() as u64;

        if spec.noise_rate > 0.0 && all_blocks > 0 && dwell_ms > 2 {
            let expected = spec.noise_rate * dwell_ms as f64 / 1000.0;
            let count = poisson(expected, &mut rng);
            let mut times: Vec<u64> = (0..count).map(|_| rng.random_range(1..dwell_ms)).collect();
            times.sort_unstable();
            for t in times {
                let mut pick = rng.random_range(0..all_blocks);
                let mut target = total_blocks[0];
                for &(f, n) in &total_blocks {
                    if pick < n {
                        target = (f, pick);
                        break;
                    }
                    pick -= n;
                }
                let (file, block) = target;
                let offset = block * bs;
                records.push(ReadRecord {
                    timestamp_ms: now + t,
                    file,
                    offset,
                    length: bs.min(sizes[&file] - offset),
                });
            }
        }
        now += dwell_ms;
        current = next;
    }

    Ok(Trace {
        id: format!("synth-{seed}"),
        records,
        manifest,
    })
}

fn pick_next(edges: &[(usize, f64)], rng: &mut ChaCha8Rng) -> Option<usize> {
    if edges.is_empty() {
        return None;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(to, p) in edges {
        acc += p;
        if u < acc {
            return Some(to);
        }
    }
    edges.last().map(|e| e.0)
}

// Knuth's method; the expected counts here are small.
fn poisson(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    let limit = (-lambda).exp();
    let mut k = 0;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}
